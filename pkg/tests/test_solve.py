from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp

from stochopf.cli import resolve_forecasts
from stochopf.forecast import Forecast
from stochopf.netcase import load_case
from stochopf.socp import ConicProgram, ScenarioConfig, build
from stochopf.solve import (
    TOL_ENV,
    SolverOptions,
    diagnose_infeasibility,
    extract_policies,
    solve,
)

from conftest import FIXTURES, solve_scenario


def test_trivial_lp():
    # min x + y  s.t.  x >= 1, y >= 2
    prog = ConicProgram()
    x, y = prog.add_variables(["x", "y"])
    prog.add_block("nonneg", sp.identity(2, format="csr"), [-1.0, -2.0])
    prog.add_objective(x, 1.0)
    prog.add_objective(y, 1.0)
    res = solve(prog)
    assert res.status == "optimal"
    assert res.objective == pytest.approx(3.0, abs=1e-7)
    assert res.x == pytest.approx([1.0, 2.0], abs=1e-7)


def test_infeasible_lp():
    prog = ConicProgram()
    x = prog.add_variable("x")
    prog.add_block("nonneg", sp.csr_matrix([[1.0], [-1.0]]), [-2.0, 1.0])  # x >= 2, x <= 1
    prog.add_objective(x, 1.0)
    res = solve(prog)
    assert res.status == "infeasible" and res.x is None and np.isnan(res.objective)


def test_unbounded_lp():
    prog = ConicProgram()
    x = prog.add_variable("x")
    prog.add_block("nonneg", sp.csr_matrix([[1.0]]), [0.0])
    prog.add_objective(x, -1.0)
    assert solve(prog).status == "unbounded"


def test_tolerance_from_environment(monkeypatch):
    monkeypatch.setenv(TOL_ENV, "1e-6")
    opts = SolverOptions.from_env()
    assert opts.tol_feas == opts.tol_gap_rel == 1e-6
    monkeypatch.setenv(TOL_ENV, "-1")
    with pytest.raises(ValueError):
        SolverOptions.from_env()


def test_zero_uncertainty_gives_zero_response(case5, case5_artificial):
    T = 12
    fc = {4: Forecast(case5_artificial[4].mean, np.zeros((T, T)))}
    model, res, sol = solve_scenario(case5, fc, "s2", T=T)
    assert res.status == "optimal"
    for M in list(sol.G.values()) + list(sol.S.values()):
        assert np.max(np.abs(M)) <= 1e-7


def test_case5_balance_residual(case5_s2):
    model, res, sol = case5_s2
    assert sol.is_optimal
    assert sol.balance_residual(model.forecasts, model.loads) <= 1e-8
    assert res.equality_residual <= 1e-9


def test_policies_are_lower_triangular(case5_s2):
    _, _, sol = case5_s2
    for M in list(sol.G.values()) + list(sol.S.values()):
        assert np.all(np.triu(M, 1) == 0)


def test_storage_lowers_cost(case5_s1, case5_s2):
    assert case5_s2[2].objective <= case5_s1[2].objective


def test_resolve_is_deterministic(case5, case5_artificial, case5_s2):
    model = build(case5, case5_artificial, ScenarioConfig.for_scenario("s2", T=12))
    res = solve(model.program)
    assert res.objective == case5_s2[1].objective
    assert np.array_equal(res.x, case5_s2[1].x)


def test_infeasible_result_has_no_policies(case5, case5_artificial):
    # an impossible line rating forces infeasibility
    lines = tuple(replace(ln, p_line_max=1e-3) if ln.id == 2 else ln for ln in case5.lines)
    case = replace(case5, lines=lines)
    model = build(case, case5_artificial, ScenarioConfig.for_scenario("s1", T=12))
    res = solve(model.program)
    sol = extract_policies(res, model)
    assert res.status == "infeasible" and not sol.is_optimal and not sol.G


# -- diagnostics --------------------------------------------------------------


def _fixture(name):
    case = load_case(FIXTURES / f"{name}.json")
    return case, resolve_forecasts(case, 4)


def test_capacity_fixture_flagged():
    case, fc = _fixture("infeasible_capacity")
    config = ScenarioConfig.for_scenario("s1", T=4)
    assert "demand-exceeds-capacity" in diagnose_infeasibility(case, fc, config).names
    model = build(case, fc, config)
    assert solve(model.program).status == "infeasible"


def test_ramp_fixture_flagged():
    case, fc = _fixture("infeasible_ramp")
    config = ScenarioConfig.for_scenario("s1", T=4)
    report = diagnose_infeasibility(case, fc, config)
    assert "ramp-limited" in report.names
    assert [f["t"] for f in report.flags if f["flag"] == "ramp-limited"] == [3]
    json.dumps(report.to_dict())


def test_feasible_case_has_no_flags(case5, case5_artificial):
    config = ScenarioConfig.for_scenario("s2", T=12)
    assert diagnose_infeasibility(case5, case5_artificial, config).names == set()


def test_global_factor_mismatch_flagged():
    case = load_case("case39")
    fc = resolve_forecasts(case, 12, "artificial")
    scaled = {b: Forecast(f.mean, f.factor * (1 + k)) for k, (b, f) in enumerate(fc.items())}
    config = ScenarioConfig.for_scenario("s2", T=12, balancing="global")
    assert "global-factor-mismatch" in diagnose_infeasibility(case, scaled, config).names
