from __future__ import annotations

from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochopf.forecast import (
    ARTIFICIAL_FACTOR,
    Forecast,
    ForecastError,
    HistoryForecastConfig,
    KernelComponent,
    KernelSpec,
    artificial_forecast,
    factorize,
    forecast_from_history,
    gpr_fit,
    gpr_predict,
    kernel_eval,
    log_marginal_likelihood,
    read_series_csv,
    scale_to_capacity,
    smooth_rolling,
)

WIND = str(resources.files("stochopf") / "data" / "wind_history.csv")

# log marginal likelihood of the last 24 smoothed, scaled (peak 3.0) fixture
# hours under the default kernel; recorded from a run as a regression baseline
LML_DEFAULT_BASELINE = 61.387400275586614
LML_OPTIMIZED_BASELINE = 66.63341212465482


def rbf(var=1.0, ls=1.0, noise=0.0):
    return KernelSpec((KernelComponent("rbf", var, ls),), noise)


# -- kernel -------------------------------------------------------------------


def test_rbf_at_zero_lag():
    assert kernel_eval(rbf(), 3.0, 3.0) == 1.0


def test_constant_kernel_is_bare_offset():
    spec = KernelSpec((KernelComponent("constant", 0.5),))
    assert kernel_eval(spec, 0.0, 17.0) == 0.5


def test_cosine_half_period():
    spec = KernelSpec((KernelComponent("cosine", 1.0, 2.0),))
    assert kernel_eval(spec, 1.0, 0.0) == pytest.approx(-1.0)


def test_composite_kernel_formula():
    spec = KernelSpec((KernelComponent("cosine", 0.4, 24.0), KernelComponent("rbf", 0.9, 3.0),
                       KernelComponent("constant", 0.2)))
    tau = 5.0
    expected = 0.4 * np.cos(2 * np.pi * tau / 24) + 0.9 * np.exp(-tau**2 / 18) + 0.2
    assert kernel_eval(spec, 7.0, 2.0) == pytest.approx(expected, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50))
def test_kernel_symmetry(t, s):
    spec = KernelSpec.default()
    assert kernel_eval(spec, t, s) == kernel_eval(spec, s, t)


def test_kernel_parameter_validation():
    with pytest.raises(ValueError):
        KernelComponent("rbf", -1.0, 1.0)
    with pytest.raises(ValueError):
        KernelComponent("rbf", 1.0, 0.0)
    with pytest.raises(ValueError):
        KernelComponent("matern", 1.0, 1.0)


# -- regression ---------------------------------------------------------------


@pytest.mark.parametrize("center", [True, False])
def test_single_point_interpolation(center):
    post = gpr_fit([0.0], [3.0], rbf(), center=center)
    mean, cov = gpr_predict(post, [0.0])
    assert mean[0] == pytest.approx(3.0, abs=1e-8)
    assert cov[0, 0] == pytest.approx(0.0, abs=1e-8)


def test_no_optimization_keeps_hyperparameters():
    spec = KernelSpec.default()
    post = gpr_fit(np.arange(5.0), np.sin(np.arange(5.0)), spec, optimize=False)
    assert post.spec == spec


def test_training_points_reproduced_without_noise():
    t = np.arange(6.0)
    y = np.array([1.0, 2.5, 2.0, 0.5, 1.5, 3.0])
    post = gpr_fit(t, y, rbf(2.0, 1.5))
    mean, cov = gpr_predict(post, t)
    assert np.allclose(mean, y, atol=1e-6)
    assert np.allclose(np.diag(cov), 0.0, atol=1e-6)


def test_prior_prediction():
    spec = rbf(0.7, 2.0)
    post = gpr_fit([], [], spec)
    h = np.arange(1.0, 5.0)
    mean, cov = gpr_predict(post, h)
    assert np.all(mean == 0.0)
    assert np.allclose(cov, spec.gram(h, h))


def test_far_horizon_variance():
    # rbf correlation vanishes far away; the constant term stays correlated
    # with the data, so the limit is s2 + s3 - s3^2 1'K^-1 1
    s2, s3, noise = 0.8, 0.3, 0.05
    spec = KernelSpec((KernelComponent("rbf", s2, 1.0), KernelComponent("constant", s3)), noise)
    t = np.arange(5.0)
    post = gpr_fit(t, np.cos(t), spec)
    _, cov = gpr_predict(post, [1e4])
    K = spec.gram(t, t) + noise * np.eye(5)
    expected = s2 + s3 - s3**2 * np.ones(5) @ np.linalg.solve(K, np.ones(5))
    assert cov[0, 0] == pytest.approx(expected, rel=1e-9)
    assert cov[0, 0] < s2 + s3
    # without data the limit is exactly s2 + s3
    _, prior = gpr_predict(gpr_fit([], [], spec), [1e4])
    assert prior[0, 0] == pytest.approx(s2 + s3)


def test_fit_rejects_bad_input():
    with pytest.raises(ValueError, match="increasing"):
        gpr_fit([0.0, 0.0], [1.0, 2.0], rbf())
    with pytest.raises(ValueError, match="length"):
        gpr_fit([0.0, 1.0], [1.0], rbf())


def test_non_pd_gram_reports_eigenvalue():
    # a negative-variance-like gram via a huge cosine on duplicated phase is PD-singular;
    # force failure with a deliberately indefinite matrix through the helper
    from stochopf.forecast import _cholesky_with_jitter

    with pytest.raises(np.linalg.LinAlgError, match="eigenvalue"):
        _cholesky_with_jitter(np.array([[1.0, 2.0], [2.0, 1.0]]), max_tries=2)


def _fixture_window():
    _, v = read_series_csv(WIND)
    x = scale_to_capacity(smooth_rolling(v, 5), 3.0)
    return np.arange(-23, 1.0), x[-24:]


def test_fixture_log_marginal_likelihood_baseline():
    t, y = _fixture_window()
    spec = KernelSpec.default(float(np.var(y)))
    post = gpr_fit(t, y, spec)
    assert np.isfinite(post.log_marginal_likelihood)
    assert post.log_marginal_likelihood == pytest.approx(LML_DEFAULT_BASELINE, rel=1e-9)
    assert log_marginal_likelihood(spec, t, y - y.mean()) == pytest.approx(LML_DEFAULT_BASELINE, rel=1e-9)


def test_optimization_improves_likelihood_and_is_seeded():
    t, y = _fixture_window()
    spec = KernelSpec.default(float(np.var(y)))
    a = gpr_fit(t, y, spec, optimize=True, seed=0)
    b = gpr_fit(t, y, spec, optimize=True, seed=0)
    assert a.log_marginal_likelihood >= LML_DEFAULT_BASELINE
    assert a.log_marginal_likelihood == pytest.approx(LML_OPTIMIZED_BASELINE, rel=1e-6)
    assert a.spec == b.spec


def test_constant_series_has_no_residual_variance():
    t = np.arange(-23, 1.0)
    y = np.full(24, 2.0)
    post = gpr_fit(t, y, KernelSpec.default(), optimize=True)
    mean, cov = gpr_predict(post, t[2:-2])
    assert np.allclose(mean, 2.0, atol=1e-6)
    assert np.max(np.diag(cov)) < 1e-6


# -- factorization ------------------------------------------------------------


def test_factorize_identity():
    assert np.array_equal(factorize(np.eye(3), 0.0), np.eye(3))


def test_factorize_diagonal():
    assert np.allclose(factorize(np.diag([4.0, 9.0]), 0.0), np.diag([2.0, 3.0]))


def test_factorize_rank_deficient_with_jitter():
    cov = np.ones((2, 2))
    L = factorize(cov)
    assert np.all(np.diag(L) > 0)
    assert np.allclose(L @ L.T, cov + 1e-7 * np.eye(2), atol=1e-8)
    assert L[0, 1] == 0.0


def test_factorize_failure_suggests_jitter():
    with pytest.raises(np.linalg.LinAlgError, match="larger jitter"):
        factorize(np.array([[1.0, 0.0], [0.0, -1.0]]), 1e-7)
    with pytest.raises(ValueError, match="symmetric"):
        factorize(np.array([[1.0, 0.5], [0.0, 1.0]]))


# -- preprocessing ------------------------------------------------------------


def test_smoothing_examples():
    assert smooth_rolling([1, 2, 3, 4, 5], 5)[2] == 3.0
    x = np.array([0.3, -1.0, 4.0, 2.0])
    assert np.array_equal(smooth_rolling(x, 1), x)
    assert np.allclose(smooth_rolling([0, 0, 10, 0, 0], 3), [0, 10 / 3, 10 / 3, 10 / 3, 0])


def test_smoothing_rejects_even_window():
    with pytest.raises(ValueError):
        smooth_rolling([1, 2, 3], 4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=40), st.sampled_from([1, 3, 5, 7]))
def test_smoothing_preserves_length_and_range(xs, w):
    out = smooth_rolling(xs, w)
    assert len(out) == len(xs)
    assert np.all(out >= min(xs) - 1e-9) and np.all(out <= max(xs) + 1e-9)


def test_scaling_examples():
    assert np.array_equal(scale_to_capacity([1.0, 2.0], 4.0), [2.0, 4.0])
    assert np.array_equal(scale_to_capacity([1.0, 3.0], 3.0), [1.0, 3.0])
    with pytest.raises(ValueError):
        scale_to_capacity([0.0, 0.0], 1.0)


def test_fixture_scaled_to_wind_capacity(case5):
    _, v = read_series_csv(WIND)
    cap = case5.disturbances[0].capacity
    assert scale_to_capacity(smooth_rolling(v, 5), cap).max() == cap


def test_csv_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("time,mw\n0,1\n")
    with pytest.raises(ForecastError, match="timestamp,power_mw"):
        read_series_csv(bad)
    bad.write_text("timestamp,power_mw\n2020-01-01T00:00,abc\n")
    with pytest.raises(ForecastError, match=":2:"):
        read_series_csv(bad)
    with pytest.raises(FileNotFoundError, match="missing.csv"):
        read_series_csv(tmp_path / "missing.csv")


# -- artificial profile -------------------------------------------------------


def test_artificial_mean_starts_at_nominal():
    fc = artificial_forecast(1.0, 24)
    assert fc.mean[0] == -1.0
    assert fc.is_deterministic


def test_artificial_factor_top_left():
    assert ARTIFICIAL_FACTOR[0, 0] == pytest.approx(87e-4)
    assert ARTIFICIAL_FACTOR[11, 0] == pytest.approx(1590e-4)
    assert np.all(np.triu(ARTIFICIAL_FACTOR, 1) == 0)


def test_artificial_zero_nominal():
    assert np.all(artificial_forecast(0.0, 12).mean == 0.0)


def test_artificial_factor_sign_and_shape():
    fc = artificial_forecast(-3.0, 12, ARTIFICIAL_FACTOR)
    assert np.array_equal(fc.factor, -ARTIFICIAL_FACTOR)
    assert fc.mean[3] == pytest.approx(3.0 * 1.1)
    with pytest.raises(ForecastError, match="24x24"):
        artificial_forecast(1.0, 24, ARTIFICIAL_FACTOR)


# -- Forecast type ------------------------------------------------------------


def test_forecast_rejects_upper_entries():
    with pytest.raises(ForecastError, match="above the diagonal"):
        Forecast(np.zeros(2), np.array([[1.0, 0.1], [0.0, 1.0]]))


def test_forecast_json_round_trip(tmp_path):
    fc = artificial_forecast(2.0, 12, ARTIFICIAL_FACTOR)
    fc.save(tmp_path / "f.json")
    back = Forecast.load(tmp_path / "f.json")
    assert np.array_equal(back.mean, fc.mean) and np.array_equal(back.factor, fc.factor)


def test_history_forecast_consistent_with_prediction():
    _, v = read_series_csv(WIND)
    config = HistoryForecastConfig()
    fc, post = forecast_from_history(v, 24, 3.0, config=config)
    _, cov = gpr_predict(post, np.arange(1, 25, dtype=float))
    assert np.all(np.diag(fc.factor) > 0)
    assert np.all(np.triu(fc.factor, 1) == 0)
    assert np.allclose(np.diag(fc.factor @ fc.factor.T), np.diag(cov) + config.jitter, atol=1e-7)
    assert np.allclose(fc.variance, np.diag(cov) + config.jitter, atol=1e-8)


def test_history_too_short():
    with pytest.raises(ForecastError, match="cannot supply"):
        forecast_from_history(np.ones(10), 12, 1.0)


def test_sampling_reproduces_moments():
    fc = artificial_forecast(-3.0, 12, ARTIFICIAL_FACTOR)
    xi = np.random.default_rng(3).standard_normal((100_000, 12))
    d = fc.sample(xi)
    se = d.std(axis=0, ddof=1) / np.sqrt(len(d))
    assert np.all(np.abs(d.mean(axis=0) - fc.mean) <= 4 * se)
    emp = np.cov(d, rowvar=False)
    mask = np.abs(fc.covariance) > 1e-3
    assert mask.sum() > 20
    assert np.all(np.abs(emp[mask] - fc.covariance[mask]) <= 0.05 * np.abs(fc.covariance[mask]))
