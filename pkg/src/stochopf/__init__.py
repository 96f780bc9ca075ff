"""Chance-constrained multi-period DC optimal power flow with storage.

The dispatch problem under Gaussian forecast uncertainty is reformulated
exactly as a second-order cone program over affine recourse policies.
Typical use::

    from stochopf import load_case, resolve_forecasts, build, ScenarioConfig, solve

    case = load_case("case5")
    forecasts = resolve_forecasts(case, 12, "artificial")
    model = build(case, forecasts, ScenarioConfig.for_scenario("s2", T=12))
    result = solve(model.program)
"""

from .cli import RunManifest, SweepAxes, resolve_forecasts, run_scenario, run_sweep, sweep_case
from .forecast import (
    ARTIFICIAL_FACTOR,
    Forecast,
    KernelComponent,
    KernelSpec,
    artificial_forecast,
    factorize,
    forecast_from_history,
    gpr_fit,
    gpr_predict,
    kernel_eval,
    scale_to_capacity,
    smooth_rolling,
)
from .moments import AffineForm, GermIndex, PolicyVars, count_decision_vars
from .netcase import GridCase, Ptdf, compute_ptdf, load_case, parse_case
from .socp import ConicProgram, ScenarioConfig, ScenarioModel, build, lambda_of_epsilon
from .solve import PolicySolution, SolverOptions, diagnose_infeasibility, extract_policies, solve
from .validate import ValidationReport, realize, sample_germ, validate

__version__ = "0.1.0"

__all__ = [
    "ARTIFICIAL_FACTOR",
    "AffineForm",
    "ConicProgram",
    "Forecast",
    "GermIndex",
    "GridCase",
    "KernelComponent",
    "KernelSpec",
    "PolicySolution",
    "PolicyVars",
    "Ptdf",
    "RunManifest",
    "ScenarioConfig",
    "ScenarioModel",
    "SolverOptions",
    "SweepAxes",
    "ValidationReport",
    "artificial_forecast",
    "build",
    "compute_ptdf",
    "count_decision_vars",
    "diagnose_infeasibility",
    "extract_policies",
    "factorize",
    "forecast_from_history",
    "gpr_fit",
    "gpr_predict",
    "kernel_eval",
    "lambda_of_epsilon",
    "load_case",
    "parse_case",
    "realize",
    "resolve_forecasts",
    "run_scenario",
    "run_sweep",
    "sample_germ",
    "scale_to_capacity",
    "smooth_rolling",
    "solve",
    "sweep_case",
    "validate",
]
