"""Affine random-variable algebra over the Gaussian germ.

Every random quantity of the dispatch problem is Gaussian and affine in the
germ ``xi`` (i.i.d. standard normal), with mean and germ coefficients that
are themselves affine in the policy decision variables::

    x = (a0 + a . v) + sum_g (b0_g + B_g . v) xi_g

:class:`AffineForm` stores ``a``/``B`` as scipy sparse matrices over the
decision-variable vector ``v`` and ``a0``/``b0`` as dense constants.  Times
are 0-based internally (``t = 0`` is the first hour of the horizon).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .forecast import Forecast
from .netcase import Ptdf

BALANCING_MODES = ("local", "global")


@dataclass(frozen=True)
class GermIndex:
    """Dense coordinates of the germ.

    Disturbance coordinates are bus-major, time-minor; one extra coordinate
    per storage with uncertain initial energy follows them.
    """

    disturbance_buses: tuple[int, ...]
    T: int
    ic_buses: tuple[int, ...] = ()

    @property
    def n_disturbance_coords(self) -> int:
        return len(self.disturbance_buses) * self.T

    @property
    def dim(self) -> int:
        return self.n_disturbance_coords + len(self.ic_buses)

    def index(self, bus: int, k: int) -> int:
        return self.disturbance_buses.index(bus) * self.T + k

    def ic_index(self, bus: int) -> int:
        return self.n_disturbance_coords + self.ic_buses.index(bus)

    def coordinate(self, g: int) -> tuple[int, int] | tuple[str, int]:
        """Inverse map: (bus, k) for disturbance coordinates, ("ic", bus) otherwise."""
        if g < self.n_disturbance_coords:
            return self.disturbance_buses[g // self.T], g % self.T
        return "ic", self.ic_buses[g - self.n_disturbance_coords]


@lru_cache(maxsize=None)
def _tril_template(T: int) -> np.ndarray:
    M = np.full((T, T), -1, dtype=np.int64)
    rows, cols = np.tril_indices(T)
    M[rows, cols] = np.arange(len(rows))
    M.flags.writeable = False
    return M


def _tril_block(offset: int, T: int) -> np.ndarray:
    """T x T int array numbering the lower triangle row-wise, -1 above."""
    base = _tril_template(T)
    return np.where(base >= 0, base + offset, -1)


@dataclass(frozen=True)
class PolicyVars:
    """Layout of the affine-policy parameters in the decision vector.

    ``u_hat[i]`` / ``s_hat[i]`` hold variable indices of the nominal
    schedules, ``G[i, j]`` / ``S[i, j]`` the lower-triangular response
    matrices (``-1`` marks the structural zeros above the diagonal).  In
    global mode all ``j`` of a device share one array.
    """

    mode: str
    T: int
    generator_buses: tuple[int, ...]
    storage_buses: tuple[int, ...]
    disturbance_buses: tuple[int, ...]
    u_hat: Mapping[int, np.ndarray]
    G: Mapping[tuple[int, int], np.ndarray]
    s_hat: Mapping[int, np.ndarray]
    S: Mapping[tuple[int, int], np.ndarray]
    n_vars: int

    @classmethod
    def create(
        cls,
        mode: str,
        generator_buses: Sequence[int],
        storage_buses: Sequence[int],
        disturbance_buses: Sequence[int],
        T: int,
    ) -> PolicyVars:
        if mode not in BALANCING_MODES:
            raise ValueError(f"balancing mode must be one of {BALANCING_MODES}")
        if T < 1:
            raise ValueError("horizon must be positive")
        gens, stos, dist = tuple(generator_buses), tuple(storage_buses), tuple(disturbance_buses)
        if set(gens) & set(stos):
            raise ValueError("a bus cannot host both a generator and a storage")
        n_tri = T * (T + 1) // 2
        offset = 0
        hats: list[dict] = [{}, {}]
        mats: list[dict] = [{}, {}]
        for kind, buses in enumerate((gens, stos)):
            for i in buses:
                hats[kind][i] = np.arange(offset, offset + T)
                offset += T
                if mode == "global":
                    shared = _tril_block(offset, T)
                    offset += n_tri
                    for j in dist:
                        mats[kind][i, j] = shared
                else:
                    for j in dist:
                        mats[kind][i, j] = _tril_block(offset, T)
                        offset += n_tri
        return cls(mode, T, gens, stos, dist, hats[0], mats[0], hats[1], mats[1], offset)

    def names(self) -> list[str]:
        names = [""] * self.n_vars
        for sym, mat_sym, hats, mats in (("u", "G", self.u_hat, self.G), ("s", "S", self.s_hat, self.S)):
            for i, idx in hats.items():
                for t, v in enumerate(idx):
                    names[v] = f"{sym}hat[{i}][{t + 1}]"
            seen = set()
            for (i, j), M in mats.items():
                key = (i, id(M))
                if key in seen:
                    continue
                seen.add(key)
                tag = f"{mat_sym}[{i}]" if self.mode == "global" else f"{mat_sym}[{i},{j}]"
                for t, k in zip(*np.tril_indices(self.T)):
                    names[M[t, k]] = f"{tag}[{t + 1},{k + 1}]"
        return names

    def free_scalar_count(self) -> int:
        """Distinct variable indices actually referenced by the layout."""
        parts = list(self.u_hat.values()) + list(self.s_hat.values())
        # global mode shares one array across disturbances; count it once
        mats = {id(M): M for M in list(self.G.values()) + list(self.S.values())}
        parts += [M[M >= 0] for M in mats.values()]
        if not parts:
            return 0
        return int(np.unique(np.concatenate(parts)).size)

    def response(self, bus: int, j: int) -> np.ndarray:
        if (bus, j) in self.G:
            return self.G[bus, j]
        return self.S[bus, j]

    def numeric(self, x: np.ndarray) -> dict:
        """Gather numeric policy parameters from a decision vector."""
        x = np.asarray(x, dtype=float)

        def mat(M):
            out = np.zeros(M.shape)
            mask = M >= 0
            out[mask] = x[M[mask]]
            return out

        return {
            "u_hat": {i: x[idx].copy() for i, idx in self.u_hat.items()},
            "G": {key: mat(M) for key, M in self.G.items()},
            "s_hat": {i: x[idx].copy() for i, idx in self.s_hat.items()},
            "S": {key: mat(M) for key, M in self.S.items()},
        }


def count_decision_vars(mode: str, N_u: int, N_s: int, N_d: int, T: int) -> int:
    """Number of policy scalars for local or global balancing."""
    tri = T * (T + 1) // 2
    if mode == "local":
        return (N_u + N_s) * (T + N_d * tri)
    if mode == "global":
        return (N_u + N_s) * (T + tri)
    raise ValueError(f"balancing mode must be one of {BALANCING_MODES}")


class AffineForm:
    """Gaussian quantity ``mean + coeffs . xi`` with coefficients affine in ``v``."""

    __slots__ = ("mean_lin", "mean_const", "coef_lin", "coef_const")

    def __init__(self, mean_lin, mean_const, coef_lin, coef_const):
        self.mean_lin = sp.csr_matrix(mean_lin)
        self.mean_const = float(mean_const)
        self.coef_lin = sp.csr_matrix(coef_lin)
        self.coef_const = np.asarray(coef_const, dtype=float)

    @classmethod
    def zero(cls, n_vars: int, n_germ: int) -> AffineForm:
        return cls(sp.csr_matrix((1, n_vars)), 0.0, sp.csr_matrix((n_germ, n_vars)), np.zeros(n_germ))

    @classmethod
    def constant(cls, n_vars: int, mean: float, coeffs: np.ndarray) -> AffineForm:
        coeffs = np.asarray(coeffs, dtype=float)
        return cls(sp.csr_matrix((1, n_vars)), mean, sp.csr_matrix((len(coeffs), n_vars)), coeffs)

    @property
    def n_vars(self) -> int:
        return self.mean_lin.shape[1]

    @property
    def n_germ(self) -> int:
        return self.coef_const.shape[0]

    def __add__(self, other: AffineForm) -> AffineForm:
        return AffineForm(
            self.mean_lin + other.mean_lin,
            self.mean_const + other.mean_const,
            self.coef_lin + other.coef_lin,
            self.coef_const + other.coef_const,
        )

    def __sub__(self, other: AffineForm) -> AffineForm:
        return self + (-1.0) * other

    def __mul__(self, a: float) -> AffineForm:
        a = float(a)
        return AffineForm(self.mean_lin * a, self.mean_const * a, self.coef_lin * a, self.coef_const * a)

    __rmul__ = __mul__

    def __neg__(self) -> AffineForm:
        return self * -1.0

    @property
    def is_deterministic(self) -> bool:
        """True when every germ coefficient is identically zero."""
        return self.coef_lin.count_nonzero() == 0 and not np.any(self.coef_const)

    @property
    def depends_on_vars(self) -> bool:
        return self.mean_lin.count_nonzero() > 0 or self.coef_lin.count_nonzero() > 0

    def active_germs(self) -> np.ndarray:
        """Germ coordinates whose coefficient is not identically zero."""
        lin_rows = np.diff(self.coef_lin.indptr) > 0
        return np.flatnonzero(lin_rows | (self.coef_const != 0))

    # x may be a full program vector; only the leading policy block is read
    def mean_value(self, x) -> float:
        if self.n_vars == 0:
            return self.mean_const
        return float((self.mean_lin @ np.asarray(x, dtype=float)[: self.n_vars])[0]) + self.mean_const

    def coeff_values(self, x) -> np.ndarray:
        if self.n_vars == 0:
            return self.coef_const.copy()
        return self.coef_lin @ np.asarray(x, dtype=float)[: self.n_vars] + self.coef_const

    def variance(self, x) -> float:
        c = self.coeff_values(x)
        return float(c @ c)

    def std(self, x) -> float:
        return float(np.sqrt(self.variance(x)))

    def sample(self, x, xi: np.ndarray) -> np.ndarray:
        """Realisations for germ draws ``xi`` of shape (n, n_germ)."""
        return self.mean_value(x) + np.asarray(xi) @ self.coeff_values(x)


def combine_forms(weights: np.ndarray, forms: Sequence[AffineForm]) -> list[AffineForm]:
    """``out[p] = sum_m weights[p, m] * forms[m]`` as one sparse product."""
    W = np.atleast_2d(np.asarray(weights, dtype=float))
    m = len(forms)
    if W.shape[1] != m:
        raise ValueError("weight matrix does not match the number of forms")
    n_germ = forms[0].n_germ
    mean_lin = sp.vstack([f.mean_lin for f in forms], format="csr")
    mean_const = np.array([f.mean_const for f in forms])
    coef_lin = sp.vstack([f.coef_lin for f in forms], format="csr")
    coef_const = np.concatenate([f.coef_const for f in forms])
    Ws = sp.csr_matrix(W)
    WK = sp.kron(Ws, sp.identity(n_germ, format="csr"), format="csr")
    out_mean = (Ws @ mean_lin).tocsr()
    out_mconst = W @ mean_const
    out_coef = (WK @ coef_lin).tocsr()
    out_cconst = WK @ coef_const
    result = []
    for p in range(W.shape[0]):
        rows = slice(p * n_germ, (p + 1) * n_germ)
        result.append(AffineForm(out_mean[p], out_mconst[p], out_coef[rows], out_cconst[rows]))
    return result


# -- device forms ------------------------------------------------------------


def disturbance_form(forecast: Forecast, bus: int, germ: GermIndex, t: int, n_vars: int) -> AffineForm:
    """``d_j(t)``: forecast mean plus row ``t`` of the factor on germ ``(j, k<=t)``."""
    if forecast.horizon != germ.T:
        raise ValueError(f"forecast for bus {bus} has horizon {forecast.horizon}, expected {germ.T}")
    coeffs = np.zeros(germ.dim)
    if bus in germ.disturbance_buses:
        base = germ.index(bus, 0)
        coeffs[base : base + t + 1] = forecast.factor[t, : t + 1]
    elif not forecast.is_deterministic:
        raise ValueError(f"bus {bus} has an uncertain forecast but no germ coordinates")
    return AffineForm.constant(n_vars, forecast.mean[t], coeffs)


def _policy_form(hat: np.ndarray, mats: Mapping, bus: int, policy: PolicyVars, germ: GermIndex, t: int) -> AffineForm:
    n = policy.n_vars
    mean = sp.csr_matrix((np.ones(1), (np.zeros(1, dtype=int), [hat[t]])), shape=(1, n))
    rows, cols = [], []
    for j in policy.disturbance_buses:
        M = mats[bus, j]
        base = germ.index(j, 0)
        rows.extend(range(base, base + t + 1))
        cols.extend(M[t, : t + 1].tolist())
    coef = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(germ.dim, n))
    return AffineForm(mean, 0.0, coef, np.zeros(germ.dim))


def generation_form(policy: PolicyVars, bus: int, germ: GermIndex, t: int) -> AffineForm:
    """``u_i(t) = uhat_i[t] + sum_j sum_{k<=t} G_ij[t,k] xi_j[k]``."""
    return _policy_form(policy.u_hat[bus], policy.G, bus, policy, germ, t)


def storage_injection_form(policy: PolicyVars, bus: int, germ: GermIndex, t: int) -> AffineForm:
    return _policy_form(policy.s_hat[bus], policy.S, bus, policy, germ, t)


def storage_state_forms(
    policy: PolicyVars, bus: int, germ: GermIndex, e_ic: tuple[float, float], h: float = 1.0
) -> list[AffineForm]:
    """``[e(1), ..., e(T+1)]`` by integrating ``e(t+1) = e(t) - h s(t)``.

    The initial energy is Gaussian with ``e_ic = (mean, variance)``; a
    positive variance lives on the storage's own germ coordinate.
    """
    if not h > 0:
        raise ValueError("step length h must be positive")
    mean_ic, var_ic = e_ic
    coeffs = np.zeros(germ.dim)
    if var_ic > 0:
        coeffs[germ.ic_index(bus)] = np.sqrt(var_ic)
    states = [AffineForm.constant(policy.n_vars, mean_ic, coeffs)]
    for t in range(policy.T):
        states.append(states[-1] - h * storage_injection_form(policy, bus, germ, t))
    return states


def ramp_form(policy: PolicyVars, bus: int, germ: GermIndex, tau: int) -> AffineForm:
    """``u(tau) - u(tau-1)`` for ``tau >= 1`` (0-based, i.e. hours 2..T)."""
    if tau < 1:
        raise ValueError("ramp is defined from the second hour on")
    return generation_form(policy, bus, germ, tau) - generation_form(policy, bus, germ, tau - 1)


def net_power_form(parts: Iterable[AffineForm | None], n_vars: int, n_germ: int) -> AffineForm:
    """``p_i(t) = d_i(t) + u_i(t) + s_i(t)``; absent devices are ``None``."""
    total = AffineForm.zero(n_vars, n_germ)
    for part in parts:
        if part is not None:
            total = total + part
    return total


def line_flow_forms(ptdf: Ptdf, nodal: Sequence[AffineForm]) -> list[AffineForm]:
    """``c_l(t) = Phi_l . p(t)`` for every line, given nodal forms in bus order."""
    if len(nodal) != ptdf.matrix.shape[1]:
        raise ValueError("need one nodal form per bus")
    return combine_forms(ptdf.matrix, nodal)
