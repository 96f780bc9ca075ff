"""Conic backend adapter (Clarabel) and policy extraction."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field, replace
from typing import Mapping

import clarabel
import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import lsqr

from .forecast import Forecast
from .netcase import GridCase
from .socp import ConicProgram, ScenarioConfig, ScenarioModel, load_forecasts

logger = logging.getLogger(__name__)

STATUSES = ("optimal", "infeasible", "unbounded", "numerical-failure")
TOL_ENV = "STOCHOPF_SOLVER_TOL"

_STATUS_MAP = {
    "Solved": "optimal",
    "AlmostSolved": "optimal",
    "PrimalInfeasible": "infeasible",
    "AlmostPrimalInfeasible": "infeasible",
    "DualInfeasible": "unbounded",
    "AlmostDualInfeasible": "unbounded",
}


@dataclass(frozen=True)
class SolverOptions:
    tol_feas: float = 1e-8
    tol_gap_rel: float = 1e-8
    tol_gap_abs: float = 1e-8
    max_iter: int = 200
    polish_equalities: bool = True
    verbose: bool = False

    @classmethod
    def from_env(cls, **overrides) -> SolverOptions:
        opts = cls(**overrides)
        raw = os.environ.get(TOL_ENV)
        if raw:
            tol = float(raw)
            if not tol > 0:
                raise ValueError(f"{TOL_ENV} must be positive")
            opts = replace(opts, tol_feas=tol, tol_gap_rel=tol, tol_gap_abs=tol)
        return opts


@dataclass
class SolverResult:
    status: str
    raw_status: str
    x: np.ndarray | None
    objective: float
    iterations: int
    solve_time: float
    equality_residual: float = float("nan")


def _to_clarabel(program: ConicProgram):
    """Translate to ``min c'x  s.t.  A x + s = b, s in K`` grouped by cone kind."""
    M, c, cones = program.stacked()
    M = M.tocsr()
    offsets = np.concatenate(([0], np.cumsum([d for _, d in cones])))
    zero_rows, nonneg_rows, soc_parts = [], [], []
    for (kind, dim), start in zip(cones, offsets[:-1]):
        rows = np.arange(start, start + dim)
        if kind == "zero":
            zero_rows.append(rows)
        elif kind == "nonneg":
            nonneg_rows.append(rows)
        else:
            soc_parts.append((kind, rows))

    blocks_A, blocks_b, cone_list = [], [], []
    for rows, ctor in ((zero_rows, clarabel.ZeroConeT), (nonneg_rows, clarabel.NonnegativeConeT)):
        if rows:
            r = np.concatenate(rows)
            blocks_A.append(M[r])
            blocks_b.append(c[r])
            cone_list.append(ctor(len(r)))
    root2 = np.sqrt(2.0)
    for kind, rows in soc_parts:
        A_blk, b_blk = M[rows], c[rows]
        if kind == "rsoc":
            # 2yz >= |w|^2  <=>  |(y - z, sqrt(2) w)| <= y + z
            T = sp.lil_matrix((len(rows), len(rows)))
            T[0, 0], T[0, 1] = 1.0, 1.0
            T[1, 0], T[1, 1] = 1.0, -1.0
            for k in range(2, len(rows)):
                T[k, k] = root2
            T = T.tocsr()
            A_blk, b_blk = T @ A_blk, T @ b_blk
        blocks_A.append(A_blk)
        blocks_b.append(b_blk)
        cone_list.append(clarabel.SecondOrderConeT(len(rows)))
    n = program.n_vars
    A = sp.vstack(blocks_A, format="csc") if blocks_A else sp.csc_matrix((0, n))
    b = np.concatenate(blocks_b) if blocks_b else np.zeros(0)
    return -A, b, cone_list


def _polish_equalities(program: ConicProgram, x: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-norm correction onto the equality blocks; returns residual after."""
    blocks = [blk for blk in program.blocks if blk.kind == "zero"]
    if not blocks:
        return x, 0.0
    n = program.n_vars
    A = sp.vstack(
        [sp.csr_matrix((b.A.data, b.A.indices, b.A.indptr), shape=(b.A.shape[0], n)) for b in blocks],
        format="csr",
    )
    rhs = np.concatenate([b.b for b in blocks])
    r = A @ x + rhs
    if np.max(np.abs(r)) > 0:
        dx = lsqr(A, r, atol=1e-16, btol=1e-16, iter_lim=10 * A.shape[0] + 100)[0]
        x = x - dx
        r = A @ x + rhs
    return x, float(np.max(np.abs(r)))


def solve(program: ConicProgram, options: SolverOptions | None = None) -> SolverResult:
    options = options or SolverOptions.from_env()
    n = program.n_vars
    A, b, cones = _to_clarabel(program)
    P = sp.csc_matrix((n, n))
    q = program.objective_vector()
    settings = clarabel.DefaultSettings()
    settings.verbose = options.verbose
    settings.tol_feas = options.tol_feas
    settings.tol_gap_rel = options.tol_gap_rel
    settings.tol_gap_abs = options.tol_gap_abs
    settings.max_iter = options.max_iter
    t0 = time.perf_counter()
    solver = clarabel.DefaultSolver(P, q, A, b, cones, settings)
    sol = solver.solve()
    elapsed = time.perf_counter() - t0
    raw = str(sol.status)
    status = _STATUS_MAP.get(raw, "numerical-failure")
    if raw == "AlmostSolved":
        logger.warning("solver reached reduced accuracy only")
    x = np.array(sol.x) if status == "optimal" else None
    residual = float("nan")
    if x is not None and options.polish_equalities:
        x, residual = _polish_equalities(program, x)
    objective = program.objective_value(x) if x is not None else float("nan")
    return SolverResult(status, raw, x, objective, int(sol.iterations), elapsed, residual)


@dataclass
class PolicySolution:
    """Optimal affine-policy parameters and solver bookkeeping."""

    status: str
    objective: float
    u_hat: dict[int, np.ndarray] = field(default_factory=dict)
    G: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    s_hat: dict[int, np.ndarray] = field(default_factory=dict)
    S: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    solve_time: float = 0.0
    iterations: int = 0
    x: np.ndarray | None = None
    raw_status: str = ""

    @property
    def is_optimal(self) -> bool:
        return self.status == "optimal"

    def balance_residual(self, forecasts: Mapping[int, Forecast], loads: Mapping[int, Forecast]) -> float:
        """Largest violation of the mean and germ-coefficient balance equations."""
        if not self.is_optimal:
            return float("nan")
        means = sum(fc.mean for fc in list(forecasts.values()) + list(loads.values()))
        means = means + sum(self.u_hat.values()) + sum(self.s_hat.values())
        worst = float(np.max(np.abs(means)))
        for j, fc in forecasts.items():
            total = fc.factor.copy()
            for (i, jj), M in list(self.G.items()) + list(self.S.items()):
                if jj == j:
                    total = total + M
            worst = max(worst, float(np.max(np.abs(total))))
        return worst


def extract_policies(result: SolverResult, model: ScenarioModel) -> PolicySolution:
    if result.status != "optimal":
        return PolicySolution(result.status, float("nan"), solve_time=result.solve_time,
                              iterations=result.iterations, raw_status=result.raw_status)
    num = model.policy.numeric(result.x)
    return PolicySolution(
        status=result.status,
        objective=result.objective,
        u_hat=num["u_hat"],
        G=num["G"],
        s_hat=num["s_hat"],
        S=num["S"],
        solve_time=result.solve_time,
        iterations=result.iterations,
        x=result.x,
        raw_status=result.raw_status,
    )


@dataclass
class InfeasibilityReport:
    flags: list[dict] = field(default_factory=list)

    @property
    def names(self) -> set[str]:
        return {f["flag"] for f in self.flags}

    def to_dict(self) -> dict:
        return {"flags": self.flags}


def net_demand(case: GridCase, forecasts: Mapping[int, Forecast], T: int) -> np.ndarray:
    """Expected demand to be covered by generation and storage, per hour."""
    total = np.zeros(T)
    for fc in list(forecasts.values()) + list(load_forecasts(case, T).values()):
        total -= fc.mean
    return total


def diagnose_infeasibility(case: GridCase, forecasts: Mapping[int, Forecast],
                           config: ScenarioConfig) -> InfeasibilityReport:
    """Screen expected demand against capacity and ramping before solving."""
    report = InfeasibilityReport()
    T = config.T
    stores = case.storages if config.storage_enabled else ()
    D = net_demand(case, {b: forecasts[b] for b in case.disturbance_buses if b in forecasts}, T)
    cap_hi = sum(g.u_max for g in case.generators) + sum(s.s_max for s in stores)
    cap_lo = sum(g.u_min for g in case.generators) + sum(s.s_min for s in stores)
    for t in range(T):
        if D[t] > cap_hi + 1e-9:
            report.flags.append({"flag": "demand-exceeds-capacity", "t": t + 1,
                                 "detail": f"expected demand {D[t]:.4g} > capacity {cap_hi:.4g}"})
        elif D[t] < cap_lo - 1e-9:
            report.flags.append({"flag": "surplus-exceeds-absorption", "t": t + 1,
                                 "detail": f"expected demand {D[t]:.4g} < minimum output {cap_lo:.4g}"})
    ramp = sum(g.ramp_limits[1] for g in case.generators)
    ramp_down = sum(-g.ramp_limits[0] for g in case.generators)
    flex = sum(s.s_max - s.s_min for s in stores)
    for t in range(1, T):
        step = D[t] - D[t - 1]
        if step > ramp + flex + 1e-9 or -step > ramp_down + flex + 1e-9:
            report.flags.append({"flag": "ramp-limited", "t": t + 1,
                                 "detail": f"demand step {step:.4g} beyond ramp capability {ramp + flex:.4g}"})
    if config.balancing == "global":
        factors = [forecasts[b].factor for b in case.disturbance_buses if b in forecasts]
        if any(not np.allclose(factors[0], f, rtol=0, atol=1e-12) for f in factors[1:]):
            report.flags.append({"flag": "global-factor-mismatch", "t": None,
                                 "detail": "shared response matrices need identical disturbance factors"})
    return report
