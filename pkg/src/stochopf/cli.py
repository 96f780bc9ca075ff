"""Command-line scenario runner.

Loads a case and its forecasts, builds and solves one scenario (or a sweep
of them), validates the solution by sampling and writes machine-readable
outputs: ``schedule.csv``, ``costs.json``, ``validation.json`` and, in
sweep mode, ``sweep.csv``.

Exit codes: 0 optimal, 1 bad input, 2 solver did not reach an optimum.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .forecast import (
    ARTIFICIAL_FACTOR,
    ARTIFICIAL_HORIZON,
    Forecast,
    ForecastError,
    HistoryForecastConfig,
    artificial_forecast,
    forecast_from_history,
    read_series_csv,
)
from .moments import count_decision_vars
from .netcase import (
    BUILTIN_CASES,
    CaseError,
    CaseValidationError,
    Disturbance,
    GridCase,
    Load,
    Storage,
    load_case,
    replace_case,
)
from .socp import SCENARIOS, BuildError, ScenarioConfig, ScenarioModel, build, lambda_of_epsilon
from .solve import diagnose_infeasibility, extract_policies, solve
from .validate import validate

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INPUT, EXIT_SOLVE = 0, 1, 2
ARTIFICIAL = "artificial"
SCHEDULE_QUANTITIES = ("u", "du", "s", "e", "c")


class ManifestError(ValueError):
    pass


# -- manifest ----------------------------------------------------------------


@dataclass(frozen=True)
class SweepAxes:
    sizes: tuple[tuple[int, int], ...]
    epsilons: tuple[float, ...] = (0.05,)
    balancing: tuple[str, ...] = ("local",)

    def __post_init__(self):
        if not self.sizes or not self.epsilons or not self.balancing:
            raise ManifestError("sweep axes must all be nonempty")
        for n_d, n_s in self.sizes:
            if n_d < 0 or n_s < 0:
                raise ManifestError("sweep sizes must be nonnegative")

    def points(self) -> list[tuple[int, int, str, float]]:
        return [(nd, ns, b, e) for nd, ns in self.sizes for b in self.balancing for e in self.epsilons]


@dataclass(frozen=True)
class RunManifest:
    case: str
    out: str
    forecast: str | None = None
    scenario: str = "s2"
    epsilon: float = 0.05
    balancing: str = "local"
    horizon: int | None = None
    samples: int = 10_000
    seed: int = 0
    sweep: SweepAxes | None = None
    jobs: int = 1

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ManifestError(f"scenario must be one of {SCENARIOS}")
        if self.samples < 0:
            raise ManifestError("sample count must be nonnegative")
        if self.jobs < 1:
            raise ManifestError("jobs must be at least 1")
        if self.horizon is not None and self.horizon < 1:
            raise ManifestError("horizon must be positive")
        if self.case not in BUILTIN_CASES and not Path(self.case).is_file():
            raise ManifestError(f"case file not found: {self.case}")
        if self.forecast not in (None, ARTIFICIAL):
            _find_file(self.forecast, load_case(self.case))

    @property
    def T(self) -> int:
        if self.horizon is not None:
            return self.horizon
        return ARTIFICIAL_HORIZON if self.forecast in (None, ARTIFICIAL) else 24

    def config(self, **overrides) -> ScenarioConfig:
        kw = dict(T=self.T, epsilon=self.epsilon, balancing=self.balancing)
        kw.update(overrides)
        scenario = kw.pop("scenario", self.scenario)
        return ScenarioConfig.for_scenario(scenario, **kw)

    @classmethod
    def from_json(cls, path: str | Path) -> RunManifest:
        path = Path(path)
        if not path.is_file():
            raise ManifestError(f"manifest not found: {path}")
        doc = json.loads(path.read_text(encoding="utf-8"))
        sweep = doc.pop("sweep", None)
        if sweep is not None:
            sweep = SweepAxes(
                sizes=tuple(tuple(int(v) for v in s) for s in sweep.get("sizes", [])),
                epsilons=tuple(float(e) for e in sweep.get("epsilons", [0.05])),
                balancing=tuple(sweep.get("balancing", ["local"])),
            )
        try:
            return cls(sweep=sweep, **doc)
        except TypeError as exc:
            raise ManifestError(f"{path}: {exc}") from None


def _find_file(name: str | Path, case: GridCase | None) -> Path:
    """Resolve a data file against the cwd, the case directory and the shipped data."""
    candidates = [Path(name)]
    if case is not None and case.source_dir is not None:
        candidates.append(case.source_dir / name)
    candidates.append(Path(str(resources.files("stochopf") / "data")) / name)
    for p in candidates:
        if p.is_file():
            return p
    raise ManifestError(f"file not found: {name}")


# -- forecasts ---------------------------------------------------------------


def _artificial_for(dist: Disturbance, T: int) -> Forecast:
    if T != ARTIFICIAL_HORIZON:
        raise ForecastError(
            f"the artificial forecast factor is {ARTIFICIAL_HORIZON}x{ARTIFICIAL_HORIZON}; "
            f"horizon {T} needs a history CSV"
        )
    if dist.d_nom is None:
        raise ForecastError(f"disturbance at bus {dist.bus} needs d_nom for the artificial forecast")
    return artificial_forecast(dist.d_nom, T, ARTIFICIAL_FACTOR)


def resolve_forecasts(
    case: GridCase,
    T: int,
    source: str | None = None,
    history: HistoryForecastConfig = HistoryForecastConfig(),
) -> dict[int, Forecast]:
    """Forecast per disturbance bus.

    ``source`` overrides every disturbance's own reference.  A reference is
    ``artificial``, an inline ``{mean, factor}`` mapping, a forecast JSON or a
    ``timestamp,power_mw`` history CSV.  Disturbances sharing one history use
    consecutive non-overlapping day windows counted back from its end.
    """
    out = {}
    windows_used: dict[Path, int] = {}
    for dist in case.disturbances:
        ref = source if source is not None else dist.forecast
        if isinstance(ref, Mapping):
            fc = Forecast.from_dict(ref)
        elif ref == ARTIFICIAL:
            fc = _artificial_for(dist, T)
        else:
            path = _find_file(ref, case)
            if path.suffix.lower() == ".json":
                fc = Forecast.load(path)
            else:
                _, values = read_series_csv(path)
                k = windows_used.get(path, 0)
                windows_used[path] = k + 1
                peak = dist.capacity if dist.capacity is not None else abs(dist.d_nom or 0.0)
                if not peak > 0:
                    raise ForecastError(f"disturbance at bus {dist.bus} needs a capacity to scale its history")
                sign = 1.0 if dist.kind == "generation" else -1.0
                end = len(values) - 24 * k
                fc, _ = forecast_from_history(values, T, peak, sign=sign, start=end, config=history)
        if fc.horizon != T:
            raise ForecastError(f"forecast for bus {dist.bus} has horizon {fc.horizon}, run needs {T}")
        out[dist.bus] = fc
    return out


def fit_forecasts(manifest: RunManifest) -> list[Path]:
    """Write ``forecast_<bus>.json`` for every disturbance of the manifest's case."""
    case = load_case(manifest.case)
    out = Path(manifest.out)
    out.mkdir(parents=True, exist_ok=True)
    forecasts = resolve_forecasts(case, manifest.T, manifest.forecast)
    paths = []
    for bus, fc in sorted(forecasts.items()):
        p = out / f"forecast_{bus}.json"
        fc.save(p)
        paths.append(p)
    return paths


# -- single scenario ---------------------------------------------------------


def _fmt(v: float) -> str:
    return "" if v is None or not np.isfinite(v) else f"{v:.12g}"


def _bounds_by_quantity(model: ScenarioModel) -> dict[tuple[str, int, int], tuple[float, float, float]]:
    """(quantity, id, t) -> (lower, upper, lambda) of every chance constraint."""
    family_quantity = {"line": "c", "generation": "u", "ramp": "du", "storage_power": "s",
                       "storage_energy": "e", "terminal": "e"}
    out = {}
    for rec in model.chance:
        key = (family_quantity[rec.family], rec.key[0], rec.key[1])
        lam = lambda_of_epsilon(rec.epsilon)
        if key in out:
            lo, hi, lam0 = out[key]
            out[key] = (max(lo, rec.lower), min(hi, rec.upper), max(lam0, lam))
        else:
            out[key] = (rec.lower, rec.upper, lam)
    return out


def schedule_rows(model: ScenarioModel, x: np.ndarray) -> list[dict]:
    """Mean, std and lambda band per quantity, device and hour."""
    bounds = _bounds_by_quantity(model)
    lam_default = lambda_of_epsilon(model.config.epsilon)
    rows = []
    for q in SCHEDULE_QUANTITIES:
        for ident in sorted(model.forms[q]):
            for t, form in enumerate(model.forms[q][ident], start=1):
                if form is None:
                    continue
                mean, std = form.mean_value(x), form.std(x)
                lo, hi, lam = bounds.get((q, ident, t), (-np.inf, np.inf, lam_default))
                rows.append({
                    "quantity": q, "id": ident, "t": t,
                    "mean": mean, "std": std, "lambda": lam,
                    "band_lower": mean - lam * std, "band_upper": mean + lam * std,
                    "bound_lower": lo, "bound_upper": hi,
                })
    return rows


SCHEDULE_COLUMNS = ("quantity", "id", "t", "mean", "std", "lambda", "band_lower", "band_upper",
                    "bound_lower", "bound_upper")


def write_schedule(path: Path, rows: Sequence[dict]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCHEDULE_COLUMNS)
        for r in rows:
            w.writerow([r["quantity"], r["id"], r["t"]] + [_fmt(r[c]) for c in SCHEDULE_COLUMNS[3:]])


def read_schedule(path: Path) -> list[dict]:
    rows = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            row = {"quantity": r["quantity"], "id": int(r["id"]), "t": int(r["t"])}
            for c in SCHEDULE_COLUMNS[3:]:
                row[c] = float(r[c]) if r[c] else (-np.inf if c == "bound_lower" else np.inf)
            rows.append(row)
    return rows


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _dump(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cost_breakdown(model: ScenarioModel, x: np.ndarray) -> dict[int, float]:
    """Expected cost per generator summed over the horizon."""
    out = {}
    for g in model.case.generators:
        total = 0.0
        for form in model.forms["u"][g.bus]:
            m, v = form.mean_value(x), form.variance(x)
            total += g.gamma2 * (m * m + v) + g.gamma1 * m + g.gamma0
        out[g.bus] = total
    return out


@dataclass
class RunResult:
    status: str
    exit_code: int
    outputs: dict[str, Path] = field(default_factory=dict)
    objective: float = float("nan")


def run_scenario(manifest: RunManifest, case: GridCase | None = None,
                 forecasts: Mapping[int, Forecast] | None = None) -> RunResult:
    """Build, solve, validate and write the output bundle of one scenario."""
    case = case or load_case(manifest.case)
    config = manifest.config()
    forecasts = dict(forecasts) if forecasts is not None else resolve_forecasts(case, config.T, manifest.forecast)
    out = Path(manifest.out)
    out.mkdir(parents=True, exist_ok=True)

    for bus, fc in sorted(forecasts.items()):
        fc.save(out / f"forecast_{bus}.json")
    model = build(case, forecasts, config)
    result = solve(model.program)
    solution = extract_policies(result, model)
    costs = {
        "case": case.name,
        "scenario": manifest.scenario,
        "balancing": config.balancing,
        "epsilon": config.epsilon,
        "horizon": config.T,
        "status": result.status,
        "solver_status": result.raw_status,
        "objective": result.objective,
        "n_policy_vars": model.n_policy_vars,
        "expected_policy_vars": count_decision_vars(
            config.balancing, len(model.case.generators), len(model.case.storages),
            len(model.case.disturbances), config.T),
        "n_bookkeeping_vars": model.n_bookkeeping_vars,
        "iterations": result.iterations,
        "solve_time_s": result.solve_time,
    }
    outputs = {"costs": out / "costs.json"}
    if not solution.is_optimal:
        report = diagnose_infeasibility(case, forecasts, config)
        costs["diagnostics"] = report.to_dict()
        _dump(outputs["costs"], costs)
        outputs["diagnostics"] = out / "diagnostics.json"
        _dump(outputs["diagnostics"], {"status": result.status, **report.to_dict()})
        logger.error("scenario %s on %s ended %s; flags: %s", manifest.scenario, case.name,
                     result.status, sorted(report.names) or "none")
        return RunResult(result.status, EXIT_SOLVE, outputs)

    costs["per_generator"] = cost_breakdown(model, solution.x)
    costs["balance_residual"] = solution.balance_residual(model.forecasts, model.loads)
    _dump(outputs["costs"], costs)
    outputs["schedule"] = out / "schedule.csv"
    write_schedule(outputs["schedule"], schedule_rows(model, solution.x))
    if manifest.samples > 0:
        report = validate(model, solution, manifest.samples, manifest.seed)
        outputs["validation"] = out / "validation.json"
        _dump(outputs["validation"], report.to_dict())
    return RunResult("optimal", EXIT_OK, outputs, result.objective)


# -- sweep -------------------------------------------------------------------


def _load_ranking(case: GridCase) -> list[int]:
    """Load buses by decreasing nominal load (ties by bus id)."""
    return [ld.bus for ld in sorted(case.loads, key=lambda ld: (-abs(ld.d_nom), ld.bus))]


def sweep_case(case: GridCase, n_d: int, n_s: int, seed: int = 0) -> GridCase:
    """Variant of ``case`` with ``n_d`` uncertain disturbances and ``n_s`` storages.

    Existing disturbances and storages are kept in order; extra disturbances
    turn the highest fixed loads uncertain, extra storages go to randomly
    chosen (seeded) buses without a device, copying the first storage's data.
    Dropped disturbances become fixed loads at their nominal value.
    """
    dists = list(case.disturbances[:n_d])
    loads = list(case.loads)
    for dropped in case.disturbances[n_d:]:
        if dropped.d_nom is None:
            raise BuildError(f"cannot fix disturbance at bus {dropped.bus} without d_nom")
        loads.append(Load(dropped.bus, dropped.d_nom))
    ranking = [b for b in _load_ranking(case) if b not in {d.bus for d in dists}]
    template = case.disturbances[0] if case.disturbances else None
    while len(dists) < n_d:
        if not ranking:
            raise BuildError(f"{case.name} has no fixed load left to make uncertain (asked for {n_d})")
        bus = ranking.pop(0)
        ld = next(ld for ld in loads if ld.bus == bus)
        loads.remove(ld)
        ref = template.forecast if template is not None else ARTIFICIAL
        dists.append(Disturbance(bus, ref, ld.d_nom, abs(ld.d_nom), "load"))

    stores = list(case.storages[:n_s])
    if len(stores) < n_s:
        base = case.storages[0] if case.storages else Storage(0, 0.0, 6.0, -10.0, 10.0, 2.0, 0.0, 0.19, 0.21)
        busy = set(case.generator_buses) | {s.bus for s in stores}
        free = [b for b in case.buses if b not in busy]
        rng = np.random.default_rng(seed)
        rng.shuffle(free)
        if len(free) < n_s - len(stores):
            raise BuildError(f"{case.name} has no room for {n_s} storages")
        for bus in free[: n_s - len(stores)]:
            stores.append(replace(base, bus=int(bus)))
    return replace_case(case, disturbances=tuple(dists), loads=tuple(sorted(loads, key=lambda ld: ld.bus)),
                        storages=tuple(stores))


def sweep_forecasts(case: GridCase, base: GridCase, T: int, source: str | None) -> dict[int, Forecast]:
    """Forecasts for a sweep variant.

    Original disturbances keep their own forecast; added uncertain loads get
    their sinusoidal mean with the first original disturbance's factor, so
    all factors coincide when the original ones do.
    """
    original = resolve_forecasts(base, T, source) if base.disturbances else {}
    template = next(iter(original.values()), None)
    out = {}
    for dist in case.disturbances:
        if dist.bus in original and dist in base.disturbances:
            out[dist.bus] = original[dist.bus]
            continue
        mean = artificial_forecast(dist.d_nom, T).mean
        factor = template.factor if template is not None else _artificial_for(dist, T).factor
        out[dist.bus] = Forecast(mean, factor)
    return out


SWEEP_COLUMNS = ("case", "N_d", "N_s", "balancing", "epsilon", "scenario", "n_policy_vars",
                 "expected_policy_vars", "solve_time_s", "objective", "status")


def _sweep_point(args: tuple) -> dict:
    manifest, n_d, n_s, balancing, eps = args
    base = load_case(manifest.case)
    case = sweep_case(base, n_d, n_s, manifest.seed)
    config = manifest.config(balancing=balancing, epsilon=eps)
    forecasts = sweep_forecasts(case, base, config.T, manifest.forecast)
    model = build(case, forecasts, config)
    result = solve(model.program)
    n_s_eff = len(model.case.storages)
    return {
        "case": base.name, "N_d": n_d, "N_s": n_s_eff, "balancing": balancing, "epsilon": eps,
        "scenario": manifest.scenario,
        "n_policy_vars": model.n_policy_vars,
        "expected_policy_vars": count_decision_vars(balancing, len(case.generators), n_s_eff, n_d, config.T),
        "solve_time_s": result.solve_time, "objective": result.objective, "status": result.status,
    }


def run_sweep(manifest: RunManifest) -> tuple[Path, list[dict]]:
    """Solve every sweep point; write per-point JSON and the merged ``sweep.csv``."""
    if manifest.sweep is None:
        raise ManifestError("sweep mode needs sweep axes")
    out = Path(manifest.out)
    points_dir = out / "sweep_points"
    points_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(manifest, *p) for p in manifest.sweep.points()]
    if manifest.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=manifest.jobs) as pool:
            rows = list(pool.map(_sweep_point, tasks))
    else:
        rows = [_sweep_point(t) for t in tasks]
    for row in rows:
        name = f"point_{row['N_d']}_{row['N_s']}_{row['balancing']}_{row['epsilon']:g}.json"
        _dump(points_dir / name, row)
    rows.sort(key=lambda r: (r["N_d"], r["N_s"], r["balancing"], r["epsilon"]))
    path = out / "sweep.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) if isinstance(r[c], float) else r[c] for c in SWEEP_COLUMNS])
    return path, rows


# -- argument parsing --------------------------------------------------------


def _parse_sizes(text: str) -> tuple[tuple[int, int], ...]:
    """``"1x1,2x1,3x1"`` -> ((1, 1), (2, 1), (3, 1))."""
    sizes = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            nd, ns = part.lower().split("x")
            sizes.append((int(nd), int(ns)))
        except ValueError:
            raise ManifestError(f"bad sweep size {part!r}; expected N_dxN_s like 2x1") from None
    return tuple(sizes)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stochopf", description=__doc__.split("\n\n")[0])
    p.add_argument("--case", default="case5", help="builtin case name (case5, case39) or case JSON path")
    p.add_argument("--scenario", choices=SCENARIOS, default="s2")
    p.add_argument("--epsilon", type=float, default=0.05, help="risk level for every chance constraint")
    p.add_argument("--balancing", choices=("local", "global"), default="local")
    p.add_argument("--horizon", type=int, default=None,
                   help="hours to schedule (default 12 for artificial forecasts, else 24)")
    p.add_argument("--forecast", default=None,
                   help="'artificial', a history CSV or a forecast JSON; default: the case's own references")
    p.add_argument("--samples", type=int, default=10_000, help="Monte Carlo samples for validation (0 skips)")
    p.add_argument("--sweep", default=None, metavar="SIZES",
                   help="complexity sweep over N_dxN_s pairs, e.g. 1x1,2x1,3x1")
    p.add_argument("--sweep-epsilons", default="0.05", help="comma-separated risk levels for the sweep")
    p.add_argument("--sweep-balancing", default="local,global", help="comma-separated balancing modes for the sweep")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel sweep points")
    p.add_argument("--manifest", default=None, help="JSON run manifest (overrides the flags above)")
    p.add_argument("--fit-only", action="store_true", help="only write forecast JSON files")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def manifest_from_args(ns: argparse.Namespace) -> RunManifest:
    if ns.manifest:
        return RunManifest.from_json(ns.manifest)
    sweep = None
    if ns.sweep is not None:
        sweep = SweepAxes(
            sizes=_parse_sizes(ns.sweep),
            epsilons=tuple(float(e) for e in ns.sweep_epsilons.split(",") if e.strip()),
            balancing=tuple(b.strip() for b in ns.sweep_balancing.split(",") if b.strip()),
        )
    return RunManifest(case=ns.case, out=ns.out, forecast=ns.forecast, scenario=ns.scenario,
                       epsilon=ns.epsilon, balancing=ns.balancing, horizon=ns.horizon,
                       samples=ns.samples, seed=ns.seed, sweep=sweep, jobs=ns.jobs)


def main(argv: Sequence[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        manifest = manifest_from_args(ns)
        if ns.fit_only:
            for p in fit_forecasts(manifest):
                print(p)
            return EXIT_OK
        if manifest.sweep is not None:
            path, rows = run_sweep(manifest)
            print(path)
            return EXIT_OK if all(r["status"] == "optimal" for r in rows) else EXIT_SOLVE
        t0 = time.perf_counter()
        result = run_scenario(manifest)
    except (ManifestError, CaseError, CaseValidationError, ForecastError, BuildError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if result.exit_code == EXIT_OK:
        print(f"{result.status}: objective {result.objective:.6f} ({time.perf_counter() - t0:.1f} s)")
    else:
        print(f"{result.status}: see {result.outputs.get('diagnostics')}", file=sys.stderr)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
