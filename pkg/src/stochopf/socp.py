"""Assembly of the chance-constrained dispatch problem as a pure SOCP.

The conic program is kept solver-neutral: every constraint is a block of
affine rows ``A v + b`` that must lie in one of

* ``zero``   -- all rows equal zero,
* ``nonneg`` -- all rows nonnegative,
* ``soc``    -- first row bounds the 2-norm of the others,
* ``rsoc``   -- ``2 * row0 * row1 >= ||rest||^2`` with ``row0, row1 >= 0``.

Quadratic cost terms go through rotated-cone epigraph variables, so the
objective is linear.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.stats import norm

from .forecast import Forecast, artificial_forecast
from .moments import (
    AffineForm,
    GermIndex,
    PolicyVars,
    count_decision_vars,
    disturbance_form,
    generation_form,
    line_flow_forms,
    net_power_form,
    storage_injection_form,
    storage_state_forms,
)
from .netcase import GridCase, Ptdf, compute_ptdf

logger = logging.getLogger(__name__)

CONE_KINDS = ("zero", "nonneg", "soc", "rsoc")
FAMILIES = ("line", "generation", "ramp", "storage_energy", "terminal", "storage_power")
SCENARIOS = ("s1", "s2", "s3")
S3_STD_CAP = 0.01


class BuildError(ValueError):
    pass


def lambda_of_epsilon(epsilon: float) -> float:
    """Standard normal quantile at ``1 - epsilon``."""
    if not 0.0 < epsilon <= 0.5:
        raise ValueError(f"risk level must lie in (0, 0.5], got {epsilon}")
    return float(norm.isf(epsilon))


@dataclass(frozen=True)
class ScenarioConfig:
    storage_enabled: bool = True
    variance_cap: float | None = None
    epsilon: float = 0.05
    balancing: str = "local"
    T: int = 24
    h: float = 1.0
    epsilon_overrides: Mapping[str, float] = field(default_factory=dict)
    terminal_band_relative: bool = False

    def __post_init__(self):
        for name, eps in [("epsilon", self.epsilon), *self.epsilon_overrides.items()]:
            if not 0.0 < eps <= 0.1:
                raise ValueError(f"{name}: risk level must lie in (0, 0.1], got {eps}")
        unknown = set(self.epsilon_overrides) - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown constraint families {sorted(unknown)}")
        if self.variance_cap is not None and not self.variance_cap > 0:
            raise ValueError("variance cap must be positive")
        if self.balancing not in ("local", "global"):
            raise ValueError("balancing must be 'local' or 'global'")
        if self.T < 1:
            raise ValueError("horizon must be positive")
        if not self.h > 0:
            raise ValueError("step length must be positive")

    @classmethod
    def for_scenario(cls, scenario: str, **kwargs) -> ScenarioConfig:
        scenario = scenario.lower()
        if scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if scenario == "s1":
            return cls(storage_enabled=False, variance_cap=None, **kwargs)
        if scenario == "s2":
            return cls(storage_enabled=True, variance_cap=None, **kwargs)
        return cls(storage_enabled=True, variance_cap=kwargs.pop("variance_cap", S3_STD_CAP), **kwargs)

    def eps(self, family: str) -> float:
        return self.epsilon_overrides.get(family, self.epsilon)


@dataclass
class ConeBlock:
    kind: str
    A: sp.csr_matrix
    b: np.ndarray
    tag: str = ""

    @property
    def dim(self) -> int:
        return self.b.shape[0]


class ConicProgram:
    """Variables, conic constraint blocks and a linear objective (minimised)."""

    def __init__(self):
        self.var_names: list[str] = []
        self.blocks: list[ConeBlock] = []
        self._c: dict[int, float] = {}
        self.objective_const = 0.0

    @property
    def n_vars(self) -> int:
        return len(self.var_names)

    def add_variable(self, name: str) -> int:
        self.var_names.append(name)
        return len(self.var_names) - 1

    def add_variables(self, names: Sequence[str]) -> np.ndarray:
        start = self.n_vars
        self.var_names.extend(names)
        return np.arange(start, self.n_vars)

    def add_block(self, kind: str, A, b, tag: str = "") -> None:
        if kind not in CONE_KINDS:
            raise ValueError(f"unknown cone kind {kind!r}")
        A = sp.csr_matrix(A)
        b = np.asarray(b, dtype=float).reshape(-1)
        if A.shape[0] != b.shape[0]:
            raise ValueError("row count mismatch in constraint block")
        if A.shape[1] > self.n_vars:
            raise ValueError("constraint references undeclared variables")
        if kind == "soc" and b.shape[0] < 1 or kind == "rsoc" and b.shape[0] < 2:
            raise ValueError(f"{kind} block too short")
        self.blocks.append(ConeBlock(kind, A, b, tag))

    def add_objective(self, var: int, coef: float) -> None:
        self._c[var] = self._c.get(var, 0.0) + float(coef)

    def objective_vector(self) -> np.ndarray:
        c = np.zeros(self.n_vars)
        for k, v in self._c.items():
            c[k] = v
        return c

    def objective_value(self, x) -> float:
        return float(self.objective_vector() @ x) + self.objective_const

    def stacked(self) -> tuple[sp.csr_matrix, np.ndarray, list[tuple[str, int]]]:
        """All blocks as one ``A v + b`` with the cone list in block order."""
        n = self.n_vars
        mats = []
        for blk in self.blocks:
            A = blk.A
            if A.shape[1] < n:
                A = sp.csr_matrix((A.data, A.indices, A.indptr), shape=(A.shape[0], n))
            mats.append(A)
        A = sp.vstack(mats, format="csr") if mats else sp.csr_matrix((0, n))
        b = np.concatenate([blk.b for blk in self.blocks]) if self.blocks else np.zeros(0)
        return A, b, [(blk.kind, blk.dim) for blk in self.blocks]

    def violations(self, x) -> dict[str, float]:
        """Largest violation per cone kind at point ``x`` (0 when satisfied)."""
        x = np.asarray(x, dtype=float)
        worst = {k: 0.0 for k in CONE_KINDS}
        for blk in self.blocks:
            A = blk.A
            r = (A @ x[: A.shape[1]]) + blk.b
            if blk.kind == "zero":
                v = float(np.max(np.abs(r))) if r.size else 0.0
            elif blk.kind == "nonneg":
                v = float(max(0.0, -r.min())) if r.size else 0.0
            elif blk.kind == "soc":
                v = max(0.0, float(np.linalg.norm(r[1:]) - r[0]))
            else:
                y, z, w = r[0], r[1], r[2:]
                v = max(0.0, -y, -z, float(w @ w - 2.0 * y * z))
            worst[blk.kind] = max(worst[blk.kind], v)
        return worst

    def summary(self) -> dict:
        counts = {k: 0 for k in CONE_KINDS}
        rows = {k: 0 for k in CONE_KINDS}
        for blk in self.blocks:
            counts[blk.kind] += 1
            rows[blk.kind] += blk.dim
        return {"n_vars": self.n_vars, "blocks": counts, "rows": rows}

    def to_json(self) -> str:
        """Deterministic debug dump (variables, cones, objective)."""
        def _f(v):
            return float(repr(float(v))) if np.isfinite(v) else str(v)

        blocks = []
        for blk in self.blocks:
            coo = blk.A.tocoo()
            order = np.lexsort((coo.col, coo.row))
            blocks.append({
                "kind": blk.kind,
                "tag": blk.tag,
                "dim": blk.dim,
                "A": [[int(coo.row[k]), int(coo.col[k]), _f(coo.data[k])] for k in order],
                "b": [_f(v) for v in blk.b],
            })
        doc = {
            "variables": self.var_names,
            "objective": {
                "linear": [[k, _f(self._c[k])] for k in sorted(self._c)],
                "constant": _f(self.objective_const),
            },
            "blocks": blocks,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _rows(form_lin, form_const, n_vars: int) -> tuple[sp.csr_matrix, np.ndarray]:
    A = sp.csr_matrix(form_lin)
    if A.shape[1] != n_vars:
        A = sp.csr_matrix((A.data, A.indices, A.indptr), shape=(A.shape[0], n_vars))
    return A, np.atleast_1d(np.asarray(form_const, dtype=float))


def _unit_row(n_vars: int, var: int, coef: float = 1.0) -> sp.csr_matrix:
    return sp.csr_matrix(([coef], ([0], [var])), shape=(1, n_vars))


def _std_term(program: ConicProgram, form: AffineForm, tag: str):
    """Return (row, const) giving sigma(form) as an affine expression.

    Variable coefficients get an epigraph variable bounded by a second-order
    cone; constant coefficients are folded in as a number.
    """
    n = program.n_vars
    active = form.active_germs()
    if form.coef_lin[active].count_nonzero() == 0:
        return sp.csr_matrix((1, n)), float(np.linalg.norm(form.coef_const))
    sigma = program.add_variable(f"std[{tag}]")
    n = program.n_vars
    coef_A, coef_b = _rows(form.coef_lin[active], form.coef_const[active], n)
    A = sp.vstack([_unit_row(n, sigma), coef_A], format="csr")
    program.add_block("soc", A, np.concatenate(([0.0], coef_b)), tag=f"std:{tag}")
    return _unit_row(n, sigma), 0.0


@dataclass
class ChanceRecord:
    """One two-sided chance constraint as emitted into the program."""

    family: str
    key: tuple
    form: AffineForm
    lower: float
    upper: float
    epsilon: float
    std_var: int | None = None


def add_chance_constraint(
    program: ConicProgram,
    form: AffineForm,
    lower: float,
    upper: float,
    epsilon: float,
    tag: str = "",
) -> int | None:
    """Emit ``lower <= mean -+ lambda(eps) * sigma`` and ``mean + lambda * sigma <= upper``.

    Returns the index of the standard-deviation epigraph variable, or None
    when none was needed (deterministic or constant-variance forms).
    """
    if lower > upper:
        raise ValueError(f"{tag}: lower bound exceeds upper bound")
    if not (np.isfinite(lower) or np.isfinite(upper)):
        return None
    lam = lambda_of_epsilon(epsilon)
    std_var = None
    if form.is_deterministic:
        std_row, std_const = sp.csr_matrix((1, program.n_vars)), 0.0
    else:
        before = program.n_vars
        std_row, std_const = _std_term(program, form, tag)
        std_var = before if program.n_vars > before else None
    n = program.n_vars
    mean_A, mean_b = _rows(form.mean_lin, form.mean_const, n)
    std_row, _ = _rows(std_row, 0.0, n)
    rows, consts = [], []
    if np.isfinite(upper):
        rows.append(-mean_A - lam * std_row)
        consts.append(upper - mean_b[0] - lam * std_const)
    if np.isfinite(lower):
        rows.append(mean_A - lam * std_row)
        consts.append(mean_b[0] - lam * std_const - lower)
    program.add_block("nonneg", sp.vstack(rows, format="csr"), np.array(consts), tag=f"cc:{tag}")
    return std_var


def add_std_cap(program: ConicProgram, form: AffineForm, sigma_max: float, tag: str = "",
                std_var: int | None = None) -> None:
    """``sqrt(Var(form)) <= sigma_max``; reuses an existing epigraph variable."""
    if not sigma_max > 0:
        raise ValueError("sigma_max must be positive")
    n = program.n_vars
    if std_var is not None:
        program.add_block("nonneg", -_unit_row(n, std_var), [sigma_max], tag=f"cap:{tag}")
        return
    active = form.active_germs()
    coef_A, coef_b = _rows(form.coef_lin[active], form.coef_const[active], n)
    A = sp.vstack([sp.csr_matrix((1, n)), coef_A], format="csr")
    program.add_block("soc", A, np.concatenate(([sigma_max], coef_b)), tag=f"cap:{tag}")


def add_balance(program: ConicProgram, total: Sequence[AffineForm]) -> None:
    """Power balance in mean and in every germ coefficient, per hour.

    ``total[t]`` is the sum of all nodal net-power forms at hour ``t``.
    Structurally identical rows (global balancing with equal factors) are
    emitted once.
    """
    n = program.n_vars
    rows, consts = [], []
    seen = set()

    def _push(A_row, b):
        key = (tuple(A_row.indices.tolist()), tuple(np.round(A_row.data, 15).tolist()), round(float(b), 15))
        if key in seen:
            return
        seen.add(key)
        rows.append(A_row)
        consts.append(b)

    for form in total:
        mA, mb = _rows(form.mean_lin, form.mean_const, n)
        _push(mA, mb[0])
        for g in form.active_germs():
            A_row, _ = _rows(form.coef_lin[g], 0.0, n)
            _push(A_row, form.coef_const[g])
    A = sp.vstack(rows, format="csr")
    b = np.array(consts)
    empty = np.diff(A.indptr) == 0
    if np.any(empty & (np.abs(b) > 0)):
        raise BuildError("power balance has a nonzero constant row with no decision variables")
    program.add_block("zero", A[~empty], b[~empty], tag="balance")


def add_objective(program: ConicProgram, gen_forms: Mapping[int, Sequence[AffineForm]],
                  gammas: Mapping[int, tuple[float, float, float]]) -> None:
    """Expected quadratic cost ``g2 (E[u]^2 + Var u) + g1 E[u] + g0`` summed over hours."""
    for bus, forms in gen_forms.items():
        g2, g1, g0 = gammas[bus]
        for t, form in enumerate(forms):
            program.objective_const += g0 + g1 * form.mean_const
            n = program.n_vars
            mA, _ = _rows(form.mean_lin, 0.0, n)
            for k, v in zip(mA.indices, mA.data):
                program.add_objective(int(k), g1 * v)
            if g2 == 0:
                continue
            q = program.add_variable(f"cost_epi[{bus}][{t + 1}]")
            n = program.n_vars
            active = form.active_germs()
            mA, mb = _rows(form.mean_lin, form.mean_const, n)
            cA, cb = _rows(form.coef_lin[active], form.coef_const[active], n)
            A = sp.vstack([_unit_row(n, q), sp.csr_matrix((1, n)), mA, cA], format="csr")
            b = np.concatenate(([0.0, 0.5], mb, cb))
            program.add_block("rsoc", A, b, tag=f"cost:{bus}:{t + 1}")
            program.add_objective(q, g2)


def load_forecasts(case: GridCase, T: int) -> dict[int, Forecast]:
    """Deterministic sinusoidal profiles for the case's fixed loads."""
    return {ld.bus: artificial_forecast(ld.d_nom, T) for ld in case.loads}


@dataclass
class ScenarioModel:
    """A built program together with everything needed to interpret it."""

    case: GridCase
    config: ScenarioConfig
    program: ConicProgram
    policy: PolicyVars
    germ: GermIndex
    ptdf: Ptdf
    forecasts: dict[int, Forecast]
    loads: dict[int, Forecast]
    forms: dict[str, dict]
    chance: list[ChanceRecord]
    balance_total: list[AffineForm]

    @property
    def n_policy_vars(self) -> int:
        return self.policy.n_vars

    @property
    def n_bookkeeping_vars(self) -> int:
        return self.program.n_vars - self.policy.n_vars


def _terminal_band(storage, relative: bool) -> tuple[float, float]:
    if relative:
        return storage.e_term_min * storage.e_max, storage.e_term_max * storage.e_max
    return storage.e_term_min, storage.e_term_max


def build(
    case: GridCase,
    forecasts: Mapping[int, Forecast],
    config: ScenarioConfig,
    ptdf: Ptdf | None = None,
) -> ScenarioModel:
    """Assemble the SOCP for one scenario.

    Decision vector layout: the policy parameters first (exactly the affine
    policy count), then bookkeeping variables -- one standard-deviation
    epigraph per chance constraint with variable coefficients and one cost
    epigraph per generator and hour.
    """
    T = config.T
    if not config.storage_enabled:
        case = case.without_storage()
    missing = [b for b in case.disturbance_buses if b not in forecasts]
    if missing:
        raise BuildError(f"no forecast for disturbance bus {missing[0]}")
    forecasts = {b: forecasts[b] for b in case.disturbance_buses}
    for b, fc in forecasts.items():
        if fc.horizon != T:
            raise BuildError(f"forecast for bus {b} has horizon {fc.horizon}, config needs {T}")
    if config.balancing == "global" and len(forecasts) > 1:
        factors = [fc.factor for fc in forecasts.values()]
        if any(not np.allclose(factors[0], f, rtol=0, atol=1e-12) for f in factors[1:]):
            logger.warning(
                "global balancing with unequal disturbance factors: the shared response "
                "matrices cannot balance every disturbance, expect infeasibility"
            )
    loads = load_forecasts(case, T)
    ptdf = ptdf if ptdf is not None else compute_ptdf(case)

    policy = PolicyVars.create(
        config.balancing, case.generator_buses, case.storage_buses, case.disturbance_buses, T
    )
    ic_buses = tuple(s.bus for s in case.storages if s.e_ic_var > 0)
    germ = GermIndex(case.disturbance_buses, T, ic_buses)
    n = policy.n_vars
    G = germ.dim

    program = ConicProgram()
    program.add_variables(policy.names())

    u_forms = {i: [generation_form(policy, i, germ, t) for t in range(T)] for i in case.generator_buses}
    s_forms = {i: [storage_injection_form(policy, i, germ, t) for t in range(T)] for i in case.storage_buses}
    d_forms = {j: [disturbance_form(fc, j, germ, t, n) for t in range(T)] for j, fc in forecasts.items()}
    l_forms = {j: [disturbance_form(fc, j, germ, t, n) for t in range(T)] for j, fc in loads.items()}
    e_forms = {
        s.bus: storage_state_forms(policy, s.bus, germ, (s.e_ic_mean, s.e_ic_var), config.h)
        for s in case.storages
    }
    du_forms = {i: [None] + [f[t] - f[t - 1] for t in range(1, T)] for i, f in u_forms.items()}

    nodal = {}
    for t in range(T):
        nodal[t] = [
            net_power_form(
                [d_forms.get(b, [None] * T)[t], l_forms.get(b, [None] * T)[t],
                 u_forms.get(b, [None] * T)[t], s_forms.get(b, [None] * T)[t]],
                n, G,
            )
            for b in case.buses
        ]
    c_forms = {t: line_flow_forms(ptdf, nodal[t]) for t in range(T)}
    total = [net_power_form(nodal[t], n, G) for t in range(T)]

    add_balance(program, total)
    add_objective(program, u_forms, {g.bus: (g.gamma2, g.gamma1, g.gamma0) for g in case.generators})

    chance: list[ChanceRecord] = []

    def _cc(family, key, form, lo, hi):
        tag = f"{family}:" + ":".join(str(k) for k in key)
        eps = config.eps(family)
        var = add_chance_constraint(program, form, lo, hi, eps, tag=tag)
        chance.append(ChanceRecord(family, key, form, lo, hi, eps, var))
        return var

    for l, ln in enumerate(case.lines):
        lo, hi = ln.limits
        if not (np.isfinite(lo) or np.isfinite(hi)):
            continue
        for t in range(T):
            _cc("line", (ln.id, t + 1), c_forms[t][l], lo, hi)

    for g in case.generators:
        dlo, dhi = g.ramp_limits
        for t in range(T):
            var = _cc("generation", (g.bus, t + 1), u_forms[g.bus][t], g.u_min, g.u_max)
            if config.variance_cap is not None:
                add_std_cap(program, u_forms[g.bus][t], config.variance_cap,
                            tag=f"u:{g.bus}:{t + 1}", std_var=var)
            if t >= 1:
                _cc("ramp", (g.bus, t + 1), du_forms[g.bus][t], dlo, dhi)

    for s in case.storages:
        states = e_forms[s.bus]
        for t in range(T):
            _cc("storage_power", (s.bus, t + 1), s_forms[s.bus][t], s.s_min, s.s_max)
            _cc("storage_energy", (s.bus, t + 2), states[t + 1], s.e_min, s.e_max)
        lo, hi = _terminal_band(s, config.terminal_band_relative)
        _cc("terminal", (s.bus, T), states[T - 1], lo, hi)

    forms = {
        "d": d_forms,
        "load": l_forms,
        "u": u_forms,
        "s": s_forms,
        "e": e_forms,
        "du": du_forms,
        "c": {ln.id: [c_forms[t][l] for t in range(T)] for l, ln in enumerate(case.lines)},
    }
    expected = count_decision_vars(
        config.balancing, len(case.generators), len(case.storages), len(case.disturbances), T
    )
    assert policy.free_scalar_count() == expected == policy.n_vars
    logger.info("built %s: %s", case.name, program.summary())
    return ScenarioModel(case, config, program, policy, germ, ptdf, dict(forecasts), loads,
                         forms, chance, total)
