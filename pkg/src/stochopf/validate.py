"""Monte Carlo validation of solved affine policies.

Germ draws are counter-based: coordinate ``g`` uses a Philox4x64 stream
keyed by ``(seed, g)``, and draw ``i`` is the ``i``-th 64-bit word of that
stream mapped through the standard normal inverse CDF.  Any sample range
can therefore be produced independently of how a batch is split.

Realisations are computed straight from the numeric policy matrices and
forecasts, not from the symbolic forms used to build the program, so the
comparison against the analytic moments is a genuine cross-check.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import ndtr, ndtri

from .moments import AffineForm
from .socp import ScenarioModel
from .solve import PolicySolution

logger = logging.getLogger(__name__)

QUANTITIES = ("d", "u", "s", "du", "e", "c")
_WORDS_PER_COUNTER = 4
# bound slack matching the solver's feasibility tolerance, so a quantity
# sitting exactly on its bound is not counted as violating it
BOUND_ATOL = 1e-7


# -- sampling ----------------------------------------------------------------


def _coordinate_draws(seed: int, coord: int, start: int, n: int) -> np.ndarray:
    bitgen = np.random.Philox(key=np.array([seed, coord], dtype=np.uint64),
                              counter=np.array([start // _WORDS_PER_COUNTER, 0, 0, 0], dtype=np.uint64))
    raw = bitgen.random_raw(n + start % _WORDS_PER_COUNTER)[start % _WORDS_PER_COUNTER:]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


def sample_germ(n: int, dim: int, seed: int = 0, start: int = 0) -> np.ndarray:
    """Standard normal germ draws ``start .. start+n-1`` as an (n, dim) array."""
    if n < 0 or start < 0:
        raise ValueError("sample range must be nonnegative")
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    out = np.empty((n, dim))
    for g in range(dim):
        out[:, g] = _coordinate_draws(seed, g, start, n)
    return out


# -- realisation -------------------------------------------------------------


@dataclass
class Trajectories:
    """Sampled quantities, each keyed by bus (or line id) with shape (n, T).

    ``e`` holds ``e(1) .. e(T+1)`` (shape (n, T+1)); ``du[:, 0]`` is NaN
    because the ramp starts at the second hour.
    """

    d: dict[int, np.ndarray]
    load: dict[int, np.ndarray]
    u: dict[int, np.ndarray]
    s: dict[int, np.ndarray]
    du: dict[int, np.ndarray]
    e: dict[int, np.ndarray]
    c: dict[int, np.ndarray]
    total: np.ndarray
    e_closed: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.total.shape[0]

    def get(self, quantity: str) -> dict[int, np.ndarray]:
        return getattr(self, quantity)


def _response(xi_blocks: Mapping[int, np.ndarray], mats: Mapping[tuple[int, int], np.ndarray], bus: int) -> np.ndarray:
    acc = None
    for j, xi_j in xi_blocks.items():
        term = xi_j @ mats[bus, j].T
        acc = term if acc is None else acc + term
    return acc


def realize(model: ScenarioModel, solution: PolicySolution, xi: np.ndarray) -> Trajectories:
    """Evaluate every random quantity of the dispatch on germ draws ``xi``."""
    case, germ, T = model.case, model.germ, model.config.T
    xi = np.asarray(xi, dtype=float)
    if xi.ndim != 2 or xi.shape[1] != germ.dim:
        raise ValueError(f"germ draws must have shape (n, {germ.dim})")
    n = xi.shape[0]
    blocks = {j: xi[:, germ.index(j, 0): germ.index(j, 0) + T] for j in germ.disturbance_buses}
    zeros = np.zeros((n, T))

    d = {j: fc.mean + blocks[j] @ fc.factor.T for j, fc in model.forecasts.items()}
    load = {j: np.broadcast_to(fc.mean, (n, T)).copy() for j, fc in model.loads.items()}
    u = {}
    for i in case.generator_buses:
        resp = _response(blocks, solution.G, i)
        u[i] = solution.u_hat[i] + (zeros if resp is None else resp)
    s = {}
    for i in case.storage_buses:
        resp = _response(blocks, solution.S, i)
        s[i] = solution.s_hat[i] + (zeros if resp is None else resp)
    du = {}
    for i, ui in u.items():
        out = np.full((n, T), np.nan)
        out[:, 1:] = np.diff(ui, axis=1)
        du[i] = out

    h = model.config.h
    e, e_closed = {}, {}
    for st in case.storages:
        e0 = np.full(n, st.e_ic_mean)
        if st.e_ic_var > 0:
            e0 = e0 + np.sqrt(st.e_ic_var) * xi[:, germ.ic_index(st.bus)]
        traj = np.empty((n, T + 1))
        traj[:, 0] = e0
        for t in range(T):
            traj[:, t + 1] = traj[:, t] - h * s[st.bus][:, t]
        e[st.bus] = traj
        closed = np.empty((n, T + 1))
        closed[:, 0] = e0
        closed[:, 1:] = e0[:, None] - h * np.cumsum(s[st.bus], axis=1)
        e_closed[st.bus] = closed

    p = np.zeros((n, T, case.n_bus))
    idx = case.bus_index
    for source in (d, load, u, s):
        for b, arr in source.items():
            p[:, :, idx[b]] += arr
    total = p.sum(axis=2)
    flows = p @ model.ptdf.matrix.T
    c = {ln.id: flows[:, :, l] for l, ln in enumerate(case.lines)}
    return Trajectories(d, load, u, s, du, e, c, total, e_closed)


def telescoping_error(model: ScenarioModel, traj: Trajectories) -> float:
    """Largest deviation of ``e(T+1) - e(1)`` from ``-h * sum_t s(t)``."""
    worst = 0.0
    h = model.config.h
    for b, e in traj.e.items():
        lhs = e[:, -1] - e[:, 0]
        rhs = -h * traj.s[b].sum(axis=1)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
        worst = max(worst, float(np.max(np.abs(e - traj.e_closed[b]))))
    return worst


# -- violation rates ---------------------------------------------------------


def empirical_violation(samples: np.ndarray, lower: float, upper: float, atol: float = BOUND_ATOL) -> dict:
    """One-sided violation rates and their binomial standard errors."""
    x = np.asarray(samples, dtype=float)
    n = x.shape[0]
    if n == 0:
        raise ValueError("no samples")
    out = {}
    for side, rate in (("lower", np.mean(x < lower - atol)), ("upper", np.mean(x > upper + atol))):
        out[side] = {"rate": float(rate), "stderr": float(np.sqrt(max(rate * (1 - rate), 0.0) / n))}
    return out


def analytic_violation(mean: float, std: float, lower: float, upper: float, atol: float = BOUND_ATOL) -> dict:
    """Gaussian tail masses below ``lower`` and above ``upper``."""
    if std <= 0:
        return {"lower": float(mean < lower - atol), "upper": float(mean > upper + atol)}
    return {"lower": float(ndtr((lower - mean) / std)), "upper": float(ndtr((mean - upper) / std))}


def _series(traj: Trajectories, family: str, key: tuple) -> np.ndarray:
    ident, t = key
    if family == "line":
        return traj.c[ident][:, t - 1]
    if family == "generation":
        return traj.u[ident][:, t - 1]
    if family == "ramp":
        return traj.du[ident][:, t - 1]
    if family == "storage_power":
        return traj.s[ident][:, t - 1]
    if family in ("storage_energy", "terminal"):
        return traj.e[ident][:, t - 1]
    raise KeyError(family)


# -- moments -----------------------------------------------------------------


def empirical_moments(traj: Trajectories) -> dict[str, dict[int, dict[str, np.ndarray]]]:
    """Sample mean, variance and standard error of the mean per quantity and hour."""
    table = {}
    n = traj.n
    for q in QUANTITIES:
        table[q] = {}
        for key, arr in traj.get(q).items():
            mean = arr.mean(axis=0)
            var = arr.var(axis=0, ddof=1) if n > 1 else np.zeros(arr.shape[1])
            table[q][key] = {"mean": mean, "var": var, "se": np.sqrt(var / n)}
    return table


def analytic_moments(model: ScenarioModel, x: np.ndarray) -> dict[str, dict[int, dict[str, np.ndarray]]]:
    """Mean and variance from the symbolic forms at decision vector ``x``."""
    forms = model.forms

    def _eval(seq):
        mean = np.array([np.nan if f is None else f.mean_value(x) for f in seq])
        var = np.array([np.nan if f is None else f.variance(x) for f in seq])
        return {"mean": mean, "var": var}

    return {q: {k: _eval(seq) for k, seq in forms[q].items()} for q in QUANTITIES}


def compare_moments(analytic: dict, empirical: dict, *, n_se: float = 4.0, rel_var: float = 0.05,
                    var_floor: float = 1e-6) -> list[dict]:
    """Rows of the moment table with per-entry pass flags."""
    rows = []
    for q in QUANTITIES:
        for key, a in analytic[q].items():
            emp = empirical[q][key]
            for t in range(len(a["mean"])):
                am, av = a["mean"][t], a["var"][t]
                if np.isnan(am):
                    continue
                em, ev, se = emp["mean"][t], emp["var"][t], emp["se"][t]
                mean_ok = abs(em - am) <= n_se * se + 1e-12 * max(1.0, abs(am))
                var_ok = av <= var_floor or abs(ev - av) <= rel_var * av
                rows.append({
                    "quantity": q, "key": key, "t": t + 1,
                    "analytic_mean": float(am), "empirical_mean": float(em), "mean_se": float(se),
                    "analytic_var": float(av), "empirical_var": float(ev),
                    "mean_pass": bool(mean_ok), "var_pass": bool(var_ok),
                })
    return rows


# -- report ------------------------------------------------------------------


@dataclass
class ValidationReport:
    n_samples: int
    seed: int
    constraints: list[dict]
    moments: list[dict]
    balance_residual: float
    telescoping_error: float

    @property
    def worst_rate(self) -> float:
        rates = [c["empirical_rate"] for c in self.constraints]
        return max(rates) if rates else 0.0

    @property
    def all_pass(self) -> bool:
        return all(c["pass"] for c in self.constraints)

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "seed": self.seed,
            "balance_residual": self.balance_residual,
            "telescoping_error": self.telescoping_error,
            "constraints": self.constraints,
            "moments": self.moments,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def rate_tolerance(epsilon: float, n: int, n_se: float = 4.0) -> float:
    return epsilon + n_se * np.sqrt(epsilon * (1 - epsilon) / n)


def validate(model: ScenarioModel, solution: PolicySolution, n: int = 10_000, seed: int = 0) -> ValidationReport:
    """Sample, realise, and compare every chance constraint and moment."""
    if not solution.is_optimal:
        raise ValueError("validation needs an optimal solution")
    xi = sample_germ(n, model.germ.dim, seed)
    traj = realize(model, solution, xi)
    x = solution.x
    constraints = []
    for rec in model.chance:
        form: AffineForm = rec.form
        mu, sd = form.mean_value(x), form.std(x)
        analytic = analytic_violation(mu, sd, rec.lower, rec.upper)
        emp = empirical_violation(_series(traj, rec.family, rec.key), rec.lower, rec.upper)
        tol = rate_tolerance(rec.epsilon, n)
        for side, bound in (("lower", rec.lower), ("upper", rec.upper)):
            if not np.isfinite(bound):
                continue
            constraints.append({
                "family": rec.family,
                "key": list(rec.key),
                "side": side,
                "epsilon": rec.epsilon,
                "analytic_prob": analytic[side],
                "empirical_rate": emp[side]["rate"],
                "stderr": emp[side]["stderr"],
                "pass": bool(emp[side]["rate"] <= tol),
            })
    moments = compare_moments(analytic_moments(model, x), empirical_moments(traj))
    report = ValidationReport(
        n, seed, constraints, moments,
        balance_residual=float(np.max(np.abs(traj.total))),
        telescoping_error=telescoping_error(model, traj),
    )
    logger.info("validated %d constraints on %d samples: worst rate %.4f",
                len(constraints), n, report.worst_rate)
    return report


def random_balanced_policy(model: ScenarioModel, rng: np.random.Generator, scale: float = 0.1) -> np.ndarray:
    """A random decision vector whose policy satisfies the power balance.

    Every policy entry is drawn at random; the first generator then closes
    the balance in mean and in each germ coefficient.
    """
    policy, T = model.policy, model.config.T
    if policy.mode != "local":
        raise ValueError("random balanced policies are drawn in local mode")
    x = np.zeros(model.program.n_vars)
    x[: policy.n_vars] = scale * rng.standard_normal(policy.n_vars)
    first = model.case.generator_buses[0]
    num = policy.numeric(x)
    mean = sum(fc.mean for fc in list(model.forecasts.values()) + list(model.loads.values()))
    others = [v for k, v in num["u_hat"].items() if k != first] + list(num["s_hat"].values())
    x[policy.u_hat[first]] = -(mean + sum(others, np.zeros(T)))
    for j, fc in model.forecasts.items():
        rest = fc.factor.copy()
        for (i, jj), M in list(num["G"].items()) + list(num["S"].items()):
            if jj == j and i != first:
                rest = rest + M
        idx = policy.G[first, j]
        mask = idx >= 0
        x[idx[mask]] = -rest[mask]
    return x
