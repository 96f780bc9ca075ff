from __future__ import annotations

import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochopf.forecast import ARTIFICIAL_FACTOR, Forecast
from stochopf.moments import (
    AffineForm,
    GermIndex,
    PolicyVars,
    count_decision_vars,
    disturbance_form,
    generation_form,
    line_flow_forms,
    net_power_form,
    ramp_form,
    storage_injection_form,
    storage_state_forms,
)
from stochopf.netcase import Ptdf


def setup(T, gens=(1,), stos=(), dist=(9,), mode="local", ic=()):
    policy = PolicyVars.create(mode, gens, stos, dist, T)
    return policy, GermIndex(tuple(dist), T, tuple(ic)), np.zeros(policy.n_vars)


def coeff_of(form, x, germ, bus, k):
    return form.coeff_values(x)[germ.index(bus, k)]


# -- disturbance --------------------------------------------------------------


def test_deterministic_disturbance():
    fc = Forecast(np.array([1.0, -2.0]), np.zeros((2, 2)))
    germ = GermIndex((), 2)
    f = disturbance_form(fc, 3, germ, 1, 0)
    assert f.is_deterministic and f.mean_value(np.zeros(0)) == -2.0


def test_disturbance_row_read_off():
    fc = Forecast(np.zeros(2), np.array([[1.0, 0.0], [2.0, 3.0]]))
    germ = GermIndex((5,), 2)
    f = disturbance_form(fc, 5, germ, 1, 0)
    assert np.array_equal(f.coeff_values(np.zeros(0)), [2.0, 3.0])


def test_disturbance_variance_from_artificial_factor():
    fc = Forecast(np.zeros(12), ARTIFICIAL_FACTOR)
    germ = GermIndex((4,), 12)
    f = disturbance_form(fc, 4, germ, 2, 0)
    assert f.variance(np.zeros(0)) == pytest.approx((292**2 + 60**2 + 7**2) * 1e-8, rel=1e-12)


def test_disturbance_horizon_mismatch():
    fc = Forecast(np.zeros(3), np.eye(3))
    with pytest.raises(ValueError, match="horizon"):
        disturbance_form(fc, 1, GermIndex((1,), 4), 0, 0)


# -- generation / storage -----------------------------------------------------


def test_zero_policy_is_deterministic():
    policy, germ, x = setup(3)
    assert generation_form(policy, 1, germ, 2).variance(x) == 0.0


def test_single_entry_policy():
    policy, germ, x = setup(3)
    x[policy.u_hat[1][0]] = 1.0
    x[policy.G[1, 9][0, 0]] = 0.5
    f = generation_form(policy, 1, germ, 0)
    assert f.mean_value(x) == 1.0 and f.variance(x) == pytest.approx(0.25)


def test_two_disturbances_add_variances():
    policy, germ, x = setup(3, dist=(7, 9))
    a, b = 0.3, -0.7
    x[policy.G[1, 7][1, 0]] = a
    x[policy.G[1, 9][1, 0]] = b
    assert generation_form(policy, 1, germ, 1).variance(x) == pytest.approx(a * a + b * b)


def test_storage_injection_mirrors_generation():
    policy, germ, x = setup(3, gens=(), stos=(2,))
    x[policy.s_hat[2][1]] = -0.4
    x[policy.S[2, 9][1, 1]] = 0.2
    f = storage_injection_form(policy, 2, germ, 1)
    assert f.mean_value(x) == -0.4 and f.variance(x) == pytest.approx(0.04)


def test_storage_state_telescopes():
    policy, germ, x = setup(2, gens=(), stos=(2,))
    x[policy.s_hat[2]] = [0.5, 0.5]
    states = storage_state_forms(policy, 2, germ, (2.0, 0.0))
    assert states[2].mean_value(x) == pytest.approx(1.0)
    assert all(e.variance(x) == 0.0 for e in states)


def test_storage_state_inner_sum():
    policy, germ, x = setup(2, gens=(), stos=(2,))
    x[policy.S[2, 9][0, 0]] = 0.3
    e3 = storage_state_forms(policy, 2, germ, (2.0, 0.0))[2]
    assert coeff_of(e3, x, germ, 9, 0) == pytest.approx(-0.3)
    assert e3.variance(x) == pytest.approx(0.09)
    x[policy.S[2, 9][1, 0]] = 0.1
    assert coeff_of(e3, x, germ, 9, 0) == pytest.approx(-0.4)


def test_storage_initial_uncertainty_gets_own_coordinate():
    policy, germ, x = setup(2, gens=(), stos=(2,), ic=(2,))
    states = storage_state_forms(policy, 2, germ, (2.0, 0.04))
    assert states[0].coeff_values(x)[germ.ic_index(2)] == pytest.approx(0.2)
    assert states[2].variance(x) == pytest.approx(0.04)
    assert germ.coordinate(germ.ic_index(2)) == ("ic", 2)


def test_storage_requires_positive_step():
    policy, germ, _ = setup(2, gens=(), stos=(2,))
    with pytest.raises(ValueError):
        storage_state_forms(policy, 2, germ, (1.0, 0.0), h=0.0)


# -- ramps --------------------------------------------------------------------


def test_constant_schedule_has_no_ramp():
    policy, germ, x = setup(3)
    x[policy.u_hat[1]] = 0.7
    r = ramp_form(policy, 1, germ, 2)
    assert r.mean_value(x) == 0.0 and r.variance(x) == 0.0


def test_ramp_diagonal_term():
    policy, germ, x = setup(3)
    x[policy.G[1, 9][1, 1]] = 0.4
    assert ramp_form(policy, 1, germ, 1).variance(x) == pytest.approx(0.16)


def test_ramp_difference_of_rows():
    policy, germ, x = setup(3)
    G = policy.G[1, 9]
    x[G[1, 0]], x[G[0, 0]], x[G[1, 1]] = 0.3, 0.1, 0.5
    r = ramp_form(policy, 1, germ, 1)
    assert coeff_of(r, x, germ, 9, 0) == pytest.approx(0.2)
    assert r.variance(x) == pytest.approx(0.04 + 0.25)


def test_ramp_undefined_at_first_hour():
    policy, germ, _ = setup(3)
    with pytest.raises(ValueError):
        ramp_form(policy, 1, germ, 0)


# -- nodal and line forms -----------------------------------------------------


def test_line_flow_dot_product():
    ptdf = Ptdf(np.array([[0.5, -0.5]]), (1,), (1, 2), 2)
    nodal = [AffineForm.constant(0, 1.0, np.zeros(0)), AffineForm.constant(0, -1.0, np.zeros(0))]
    assert line_flow_forms(ptdf, nodal)[0].mean_value(np.zeros(0)) == pytest.approx(1.0)
    zeros = [AffineForm.zero(0, 0)] * 2
    flow = line_flow_forms(ptdf, zeros)[0]
    assert flow.mean_value(np.zeros(0)) == 0.0 and flow.is_deterministic


def test_line_flow_variance_without_recourse():
    ell = 0.37
    ptdf = Ptdf(np.array([[0.7, 0.0]]), (1,), (1, 2), 2)
    germ = GermIndex((1,), 1)
    d = disturbance_form(Forecast(np.zeros(1), np.array([[ell]])), 1, germ, 0, 0)
    flow = line_flow_forms(ptdf, [d, AffineForm.zero(0, 1)])[0]
    assert flow.variance(np.zeros(0)) == pytest.approx(0.49 * ell**2)


def test_net_power_form():
    policy, germ, x = setup(1, dist=())
    n = policy.n_vars
    load = AffineForm.constant(n, -1.0, np.zeros(0))
    assert net_power_form([load, None, None], n, 0).mean_value(x) == -1.0
    assert net_power_form([None, None], n, 0).mean_value(x) == 0.0
    x[policy.u_hat[1][0]] = 1.0
    total = net_power_form([load, generation_form(policy, 1, germ, 0)], n, 0)
    assert total.mean_value(x) == 0.0


# -- counts -------------------------------------------------------------------


@pytest.mark.parametrize(
    "mode,N_u,N_s,N_d,T,expected",
    [("local", 2, 1, 1, 24, 972), ("global", 2, 1, 1, 24, 972), ("local", 10, 5, 7, 12, 8370),
     ("local", 2, 0, 1, 24, 648)],
)
def test_count_examples(mode, N_u, N_s, N_d, T, expected):
    assert count_decision_vars(mode, N_u, N_s, N_d, T) == expected
    policy = PolicyVars.create(mode, range(N_u), range(100, 100 + N_s), range(200, 200 + N_d), T)
    assert policy.n_vars == policy.free_scalar_count() == expected


def test_global_count_independent_of_disturbances():
    counts = {count_decision_vars("global", 2, 1, n, 24) for n in range(1, 6)}
    assert counts == {972}


def test_names_unique():
    policy = PolicyVars.create("local", (1, 2), (3,), (4, 5), 3)
    names = policy.names()
    assert len(set(names)) == len(names) == policy.n_vars
    assert "G[1,4][2,1]" in names and "shat[3][3]" in names


def test_invalid_mode():
    with pytest.raises(ValueError):
        count_decision_vars("hybrid", 1, 1, 1, 1)
    with pytest.raises(ValueError):
        PolicyVars.create("hybrid", (1,), (), (2,), 2)


# -- properties ---------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_causality(T, n_dist, seed):
    rng = np.random.default_rng(seed)
    dist = tuple(range(10, 10 + n_dist))
    policy, germ, _ = setup(T, gens=(1,), stos=(2,), dist=dist)
    x = rng.standard_normal(policy.n_vars)
    for t in range(T):
        forms = [generation_form(policy, 1, germ, t), storage_injection_form(policy, 2, germ, t)]
        forms.append(storage_state_forms(policy, 2, germ, (1.0, 0.0))[t + 1])
        for f in forms:
            for g in f.active_germs():
                assert germ.coordinate(g)[1] <= t
            c = f.coeff_values(x)
            for j in dist:
                assert np.all(c[germ.index(j, t + 1) : germ.index(j, 0) + T] == 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3))
def test_linearity(seed, a):
    rng = np.random.default_rng(seed)
    policy, germ, _ = setup(4, gens=(1, 3), stos=(2,), dist=(10, 11))
    x = rng.standard_normal(policy.n_vars)
    f = generation_form(policy, 1, germ, 3)
    g = storage_state_forms(policy, 2, germ, (1.0, 0.0))[3]
    s = f + a * g
    assert s.mean_value(x) == pytest.approx(f.mean_value(x) + a * g.mean_value(x), abs=1e-12)
    assert np.allclose(s.coeff_values(x), f.coeff_values(x) + a * g.coeff_values(x), atol=1e-12)
    assert (f - f).variance(x) == 0.0


def test_count_grid_is_fast():
    start = time.perf_counter()
    for mode in ("local", "global"):
        for N_u in range(1, 11):
            for N_s in range(0, 6):
                for N_d in range(1, 8):
                    for T in (12, 24):
                        count_decision_vars(mode, N_u, N_s, N_d, T)
    assert time.perf_counter() - start < 1.0
