"""Gaussian-process forecasts of uncertain disturbances.

A :class:`Forecast` is the pair (mean vector, lower-triangular factor) so that
``d(t) = mean[t] + sum_{k<=t} factor[t, k] * xi[k]`` with i.i.d. standard
normal ``xi``.  Forecasts come either from GP regression on a historical
series or from the sinusoidal artificial profile used for loads.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

DEFAULT_JITTER = 1e-7

# Lower-triangular 12x12 forecast factor of the wind disturbance, in units of 1e-4 p.u.
_ARTIFICIAL_FACTOR_1E4 = np.array(
    [
        [87, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
        [176, 20, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
        [292, 60, 7, 0, 0, 0, 0, 0, 0, 0, 0, 0],
        [434, 124, 26, 3, 0, 0, 0, 0, 0, 0, 0, 0],
        [594, 211, 63, 13, 3, 0, 0, 0, 0, 0, 0, 0],
        [764, 321, 123, 31, 13, 3, 0, 0, 0, 0, 0, 0],
        [937, 447, 208, 63, 32, 11, 3, 0, 0, 0, 0, 0],
        [1103, 582, 317, 109, 65, 27, 10, 3, 0, 0, 0, 0],
        [1257, 718, 447, 172, 116, 55, 26, 10, 3, 0, 0, 0],
        [1392, 847, 591, 251, 184, 98, 53, 26, 10, 3, 0, 0],
        [1504, 964, 741, 342, 271, 156, 94, 53, 24, 9, 3, 0],
        [1590, 1063, 889, 441, 371, 229, 151, 94, 50, 24, 9, 3],
    ],
    dtype=float,
)
ARTIFICIAL_FACTOR = 1e-4 * _ARTIFICIAL_FACTOR_1E4
ARTIFICIAL_HORIZON = ARTIFICIAL_FACTOR.shape[0]


class ForecastError(ValueError):
    pass


@dataclass(frozen=True)
class Forecast:
    mean: np.ndarray
    factor: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        factor = np.asarray(self.factor, dtype=float)
        T = mean.shape[0]
        if T < 1:
            raise ForecastError("forecast horizon must be positive")
        if factor.shape != (T, T):
            raise ForecastError(f"factor must be {T}x{T}, got {factor.shape}")
        if np.any(np.triu(factor, 1) != 0.0):
            raise ForecastError("factor has nonzero entries above the diagonal")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "factor", factor)

    @property
    def horizon(self) -> int:
        return self.mean.shape[0]

    @property
    def is_deterministic(self) -> bool:
        return not np.any(self.factor)

    @property
    def variance(self) -> np.ndarray:
        return np.sum(self.factor**2, axis=1)

    @property
    def covariance(self) -> np.ndarray:
        return self.factor @ self.factor.T

    def sample(self, xi: np.ndarray) -> np.ndarray:
        """Realisations for germ draws ``xi`` of shape (n, T)."""
        return self.mean + np.asarray(xi) @ self.factor.T

    def negated(self) -> Forecast:
        return Forecast(-self.mean, -self.factor)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "factor": self.factor.tolist()}

    @classmethod
    def from_dict(cls, doc) -> Forecast:
        try:
            return cls(np.array(doc["mean"], dtype=float), np.array(doc["factor"], dtype=float))
        except KeyError as exc:
            raise ForecastError(f"forecast document lacks {exc.args[0]!r}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Forecast:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- kernels -----------------------------------------------------------------

KERNEL_KINDS = ("cosine", "rbf", "constant")


@dataclass(frozen=True)
class KernelComponent:
    """One additive kernel term.

    ``variance`` multiplies the term: sigma^2 for cosine and rbf, the bare
    offset for the constant kernel.  ``lengthscale`` is the period for the
    cosine term and is ignored for the constant one.
    """

    kind: str
    variance: float
    lengthscale: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.variance < 0:
            raise ValueError("kernel variance must be nonnegative")
        if not self.lengthscale > 0:
            raise ValueError("kernel lengthscale must be positive")

    def __call__(self, tau: np.ndarray) -> np.ndarray:
        if self.kind == "cosine":
            return self.variance * np.cos(2.0 * np.pi * tau / self.lengthscale)
        if self.kind == "rbf":
            return self.variance * np.exp(-(tau**2) / (2.0 * self.lengthscale**2))
        return np.full_like(tau, self.variance, dtype=float)


@dataclass(frozen=True)
class KernelSpec:
    components: tuple[KernelComponent, ...]
    noise: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        if self.noise < 0:
            raise ValueError("noise variance must be nonnegative")

    @classmethod
    def default(cls, scale: float = 1.0) -> KernelSpec:
        """cosine + rbf + constant with a daily period, sized to ``scale``."""
        return cls(
            (
                KernelComponent("cosine", 0.3 * scale, 24.0),
                KernelComponent("rbf", 0.5 * scale, 6.0),
                KernelComponent("constant", 0.2 * scale),
            ),
            noise=1e-3 * scale,
        )

    def gram(self, a: Sequence[float], b: Sequence[float]) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        tau = a[:, None] - b[None, :]
        out = np.zeros_like(tau)
        for comp in self.components:
            out += comp(tau)
        return out

    # log-space parameter vector used by the hyperparameter search
    def _params(self) -> np.ndarray:
        vals = []
        for c in self.components:
            vals.append(c.variance)
            if c.kind != "constant":
                vals.append(c.lengthscale)
        vals.append(self.noise)
        return np.log(np.maximum(np.array(vals), 1e-300))

    def _with_params(self, theta: np.ndarray) -> KernelSpec:
        vals = iter(np.exp(theta))
        comps = []
        for c in self.components:
            var = next(vals)
            ls = next(vals) if c.kind != "constant" else c.lengthscale
            comps.append(KernelComponent(c.kind, float(var), float(ls)))
        return KernelSpec(tuple(comps), float(next(vals)))

    def _bounds(self, y_var: float) -> np.ndarray:
        y_var = max(y_var, 1e-12)
        rows = []
        for c in self.components:
            rows.append((1e-6 * y_var, 1e2 * y_var))
            if c.kind == "cosine":
                rows.append((2.0, 200.0))
            elif c.kind == "rbf":
                rows.append((0.5, 200.0))
        rows.append((1e-8 * y_var, 1.0 * y_var))
        return np.log(np.array(rows))


def kernel_eval(spec: KernelSpec, t: float, t_prime: float) -> float:
    return float(spec.gram([t], [t_prime])[0, 0])


# -- GP regression -----------------------------------------------------------


def _cholesky_with_jitter(K: np.ndarray, max_tries: int = 8) -> tuple[np.ndarray, float]:
    jitter = 0.0
    base = max(float(np.mean(np.diag(K))), 1e-12) * 1e-10
    for _ in range(max_tries + 1):
        try:
            L = scipy.linalg.cholesky(K + jitter * np.eye(K.shape[0]), lower=True)
            return L, jitter
        except np.linalg.LinAlgError:
            jitter = base if jitter == 0.0 else 10.0 * jitter
    min_eig = float(np.linalg.eigvalsh(K).min())
    raise np.linalg.LinAlgError(
        f"Gram matrix is not positive definite after jitter {jitter:.1e} "
        f"(minimum eigenvalue estimate {min_eig:.3e})"
    )


@dataclass(frozen=True)
class GPPosterior:
    spec: KernelSpec
    times: np.ndarray
    values: np.ndarray
    offset: float
    chol: np.ndarray | None
    alpha: np.ndarray | None
    jitter: float = 0.0
    log_marginal_likelihood: float = 0.0

    @classmethod
    def prior(cls, spec: KernelSpec) -> GPPosterior:
        return cls(spec, np.zeros(0), np.zeros(0), 0.0, None, None)


def log_marginal_likelihood(spec: KernelSpec, times, residuals) -> float:
    y = np.asarray(residuals, dtype=float)
    K = spec.gram(times, times) + spec.noise * np.eye(len(y))
    try:
        L = scipy.linalg.cholesky(K, lower=True)
    except np.linalg.LinAlgError:
        return -np.inf
    a = scipy.linalg.cho_solve((L, True), y)
    return float(-0.5 * y @ a - np.sum(np.log(np.diag(L))) - 0.5 * len(y) * np.log(2 * np.pi))


def _coordinate_search(f, x0, bounds, step=1.0, min_step=1e-3, max_evals=600):
    """Maximise ``f`` by compass search clipped to box ``bounds``."""
    x = np.clip(x0, bounds[:, 0], bounds[:, 1])
    fx = f(x)
    evals = 1
    while step >= min_step and evals < max_evals:
        improved = False
        for i in range(len(x)):
            for direction in (1.0, -1.0):
                cand = x.copy()
                cand[i] = np.clip(cand[i] + direction * step, bounds[i, 0], bounds[i, 1])
                if cand[i] == x[i]:
                    continue
                fc = f(cand)
                evals += 1
                if fc > fx:
                    x, fx, improved = cand, fc, True
                    break
        if not improved:
            step *= 0.5
    return x, fx


def gpr_fit(
    times: Sequence[float],
    values: Sequence[float],
    spec: KernelSpec,
    optimize: bool = False,
    *,
    n_starts: int = 16,
    seed: int = 0,
    center: bool = True,
) -> GPPosterior:
    """Condition a GP on observations.

    With ``center`` the sample mean is used as constant prior mean.  With
    ``optimize`` the kernel hyperparameters maximise the log marginal
    likelihood via multi-start compass search in log space (first start is
    ``spec`` itself, the rest are seeded uniform draws inside the bounds).
    """
    t = np.asarray(times, dtype=float).reshape(-1)
    y = np.asarray(values, dtype=float).reshape(-1)
    if t.shape != y.shape:
        raise ValueError("times and values differ in length")
    if len(t) == 0:
        return GPPosterior.prior(spec)
    if np.any(np.diff(t) <= 0):
        raise ValueError("times must be strictly increasing")
    offset = float(np.mean(y)) if center else 0.0
    r = y - offset

    if optimize:
        bounds = spec._bounds(float(np.var(y)) if len(y) > 1 else 1.0)
        rng = np.random.default_rng(seed)
        starts = [spec._params()]
        for _ in range(n_starts - 1):
            starts.append(rng.uniform(bounds[:, 0], bounds[:, 1]))
        objective = lambda th: log_marginal_likelihood(spec._with_params(th), t, r)  # noqa: E731
        best_theta, best_val = None, -np.inf
        for x0 in starts:
            theta, val = _coordinate_search(objective, x0, bounds)
            if val > best_val:
                best_theta, best_val = theta, val
        if best_theta is not None:
            spec = spec._with_params(best_theta)

    K = spec.gram(t, t) + spec.noise * np.eye(len(t))
    L, jitter = _cholesky_with_jitter(K)
    alpha = scipy.linalg.cho_solve((L, True), r)
    lml = float(-0.5 * r @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * len(r) * np.log(2 * np.pi))
    return GPPosterior(spec, t, y, offset, L, alpha, jitter, lml)


def gpr_predict(posterior: GPPosterior, horizon_times: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and covariance (latent function, no observation noise)."""
    h = np.asarray(horizon_times, dtype=float).reshape(-1)
    spec = posterior.spec
    K_hh = spec.gram(h, h)
    if posterior.chol is None:
        return np.full(len(h), posterior.offset), 0.5 * (K_hh + K_hh.T)
    K_th = spec.gram(posterior.times, h)
    mean = posterior.offset + K_th.T @ posterior.alpha
    V = scipy.linalg.solve_triangular(posterior.chol, K_th, lower=True)
    cov = K_hh - V.T @ V
    cov = 0.5 * (cov + cov.T)
    # clip round-off so the diagonal is a valid variance
    d = np.diag(cov).copy()
    np.fill_diagonal(cov, np.maximum(d, 0.0))
    return mean, cov


def factorize(cov: np.ndarray, jitter: float = DEFAULT_JITTER) -> np.ndarray:
    """Lower Cholesky factor of ``cov + jitter * I``."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError("covariance must be square")
    if not np.allclose(cov, cov.T, atol=1e-12, rtol=1e-10):
        raise ValueError("covariance must be symmetric")
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")
    try:
        return scipy.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]), lower=True)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(
            f"Cholesky factorization failed with jitter {jitter:g}; retry with a larger jitter"
        ) from None


# -- series preprocessing ----------------------------------------------------


def smooth_rolling(series: Sequence[float], window: int) -> np.ndarray:
    """Centred moving average; the window shrinks symmetrically at the edges."""
    x = np.asarray(series, dtype=float)
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    n = len(x)
    half = window // 2
    csum = np.concatenate(([0.0], np.cumsum(x)))
    out = np.empty(n)
    for i in range(n):
        h = min(half, i, n - 1 - i)
        out[i] = (csum[i + h + 1] - csum[i - h]) / (2 * h + 1)
    return out


def scale_to_capacity(series: Sequence[float], target_peak: float) -> np.ndarray:
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        raise ValueError("empty series")
    peak = x.max()
    if not peak > 0:
        raise ValueError("series has no positive values to scale")
    out = x * (target_peak / peak)
    out[np.argmax(x)] = target_peak
    return out


def read_series_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Read a ``timestamp,power_mw`` history file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"forecast history not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"timestamp", "power_mw"} <= set(reader.fieldnames):
            raise ForecastError(f"{path}: expected header 'timestamp,power_mw'")
        stamps, values = [], []
        for k, row in enumerate(reader, start=2):
            try:
                values.append(float(row["power_mw"]))
            except (TypeError, ValueError):
                raise ForecastError(f"{path}:{k}: bad power_mw value {row['power_mw']!r}") from None
            stamps.append(row["timestamp"])
    if not values:
        raise ForecastError(f"{path}: no data rows")
    return stamps, np.array(values)


# -- forecast constructors ---------------------------------------------------


def artificial_forecast(d_nom: float, T: int, factor_source: np.ndarray | None = None) -> Forecast:
    """Sinusoidal daily profile around ``d_nom`` (consumption positive).

    The mean carries the consumption-negative sign; ``factor_source`` (or
    zero for a certain load) is negated the same way.
    """
    if T < 1:
        raise ValueError("horizon must be positive")
    t = np.arange(1, T + 1)
    mean = -d_nom * (1.0 + 0.1 * np.sin(2.0 * np.pi * (t - 1) / T))
    if factor_source is None:
        factor = np.zeros((T, T))
    else:
        src = np.asarray(factor_source, dtype=float)
        if src.shape != (T, T):
            raise ForecastError(f"factor source is {src.shape}, horizon needs {T}x{T}")
        factor = -src
    return Forecast(mean, factor + 0.0)


@dataclass(frozen=True)
class HistoryForecastConfig:
    window: int = 5
    n_train: int = 24
    jitter: float = DEFAULT_JITTER
    optimize: bool = True
    seed: int = 0
    kernel: KernelSpec | None = None


def forecast_from_history(
    values: Sequence[float],
    T: int,
    peak: float,
    *,
    sign: float = 1.0,
    start: int | None = None,
    config: HistoryForecastConfig = HistoryForecastConfig(),
) -> tuple[Forecast, GPPosterior]:
    """Smooth, scale, fit and predict ``T`` hours past a training window.

    The training window is the ``n_train`` hours ending at index ``start``
    (default: the end of the series), placed at times ``1-n_train .. 0`` so
    that the horizon is ``1..T``.
    """
    x = scale_to_capacity(smooth_rolling(values, config.window), peak)
    end = len(x) if start is None else start
    if end < config.n_train or end > len(x):
        raise ForecastError(
            f"history of length {len(x)} cannot supply {config.n_train} points ending at {end}"
        )
    y = x[end - config.n_train : end]
    times = np.arange(1 - config.n_train, 1, dtype=float)
    spec = config.kernel or KernelSpec.default(max(float(np.var(y)), 1e-6))
    post = gpr_fit(times, y, spec, optimize=config.optimize, seed=config.seed)
    mean, cov = gpr_predict(post, np.arange(1, T + 1, dtype=float))
    L = factorize(cov, config.jitter)
    return Forecast(sign * mean, sign * L), post
