from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from stochopf.cli import resolve_forecasts
from stochopf.netcase import load_case
from stochopf.socp import ScenarioConfig, build
from stochopf.solve import extract_policies, solve

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def case5():
    return load_case("case5")


@pytest.fixture(scope="session")
def case5_artificial(case5):
    return resolve_forecasts(case5, 12, "artificial")


def solve_scenario(case, forecasts, scenario, **config):
    model = build(case, forecasts, ScenarioConfig.for_scenario(scenario, **config))
    result = solve(model.program)
    return model, result, extract_policies(result, model)


@pytest.fixture(scope="session")
def case5_s2(case5, case5_artificial):
    """case5, built-in artificial forecast factor, storage, T=12, local balancing."""
    return solve_scenario(case5, case5_artificial, "s2", T=12)


@pytest.fixture(scope="session")
def case5_s1(case5, case5_artificial):
    return solve_scenario(case5, case5_artificial, "s1", T=12)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary ---------------------------------------------------------

_ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(_ACCEPTANCE_LINES[number])
