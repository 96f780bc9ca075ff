"""Grid case description, validation and PTDF computation.

Case documents are plain JSON (per-unit quantities)::

    {
      "buses": [1, 2, 3],
      "lines": [{"id": 1, "from": 1, "to": 2, "x": 0.1, "p_line_max": 2.0}, ...],
      "generators": [{"bus": 1, "u_min": 0.0, "u_max": 2.2, "ramp_frac": 0.15,
                      "gamma2": 0.01, "gamma1": 0.3, "gamma0": 0.2}, ...],
      "storages": [{"bus": 3, "e_min": 0, "e_max": 6, "s_min": -10, "s_max": 10,
                    "e_ic_mean": 2, "e_ic_var": 0, "e_term_min": 0.19,
                    "e_term_max": 0.21}, ...],
      "disturbances": [{"bus": 2, "forecast": "artificial", "d_nom": -1.0}, ...],
      "loads": [{"bus": 2, "d_nom": 1.0}, ...]
    }

Optional extras: ``p_max`` on generators (base for the ramp fraction,
defaults to ``u_max``), ``c_min``/``c_max`` on lines (override the 0.85
rating default), ``capacity``/``kind`` on disturbances, top-level
``name``, ``base_mva``, ``reference_bus`` and ``notes``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import scipy.linalg
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)

#: line limits default to this fraction of the thermal rating
LINE_RATING_FRACTION = 0.85


class CaseError(ValueError):
    """Schema violation in a case document."""


class CaseValidationError(ValueError):
    """Structurally valid document describing an unusable network."""


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    x: float
    p_line_max: float | None = None
    c_min: float | None = None
    c_max: float | None = None

    @property
    def limits(self) -> tuple[float, float]:
        """Flow band (c_min, c_max); infinite when the line is unrated."""
        lo, hi = self.c_min, self.c_max
        if self.p_line_max is not None and self.p_line_max > 0:
            if lo is None:
                lo = -LINE_RATING_FRACTION * self.p_line_max
            if hi is None:
                hi = LINE_RATING_FRACTION * self.p_line_max
        return (-np.inf if lo is None else lo, np.inf if hi is None else hi)


@dataclass(frozen=True)
class Generator:
    bus: int
    u_min: float
    u_max: float
    ramp_frac: float
    gamma2: float
    gamma1: float
    gamma0: float
    p_max: float | None = None

    @property
    def ramp_limits(self) -> tuple[float, float]:
        base = self.u_max if self.p_max is None else self.p_max
        return -self.ramp_frac * base, self.ramp_frac * base


@dataclass(frozen=True)
class Storage:
    bus: int
    e_min: float
    e_max: float
    s_min: float
    s_max: float
    e_ic_mean: float
    e_ic_var: float
    e_term_min: float
    e_term_max: float


@dataclass(frozen=True)
class Disturbance:
    bus: int
    forecast: Any
    d_nom: float | None = None
    capacity: float | None = None
    kind: str = "generation"


@dataclass(frozen=True)
class Load:
    bus: int
    d_nom: float


@dataclass(frozen=True)
class GridCase:
    buses: tuple[int, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...] = ()
    storages: tuple[Storage, ...] = ()
    disturbances: tuple[Disturbance, ...] = ()
    loads: tuple[Load, ...] = ()
    name: str = "case"
    base_mva: float = 100.0
    reference_bus: int | None = None
    source_dir: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        validate_case(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def bus_index(self) -> dict[int, int]:
        return {b: i for i, b in enumerate(self.buses)}

    @property
    def generator_buses(self) -> tuple[int, ...]:
        return tuple(g.bus for g in self.generators)

    @property
    def storage_buses(self) -> tuple[int, ...]:
        return tuple(s.bus for s in self.storages)

    @property
    def disturbance_buses(self) -> tuple[int, ...]:
        return tuple(d.bus for d in self.disturbances)

    def default_reference(self) -> int:
        if self.reference_bus is not None:
            return self.reference_bus
        if self.generators:
            return self.generators[0].bus
        return self.buses[0]

    def without_storage(self) -> GridCase:
        return replace_case(self, storages=())


def replace_case(case: GridCase, **changes) -> GridCase:
    from dataclasses import replace

    return replace(case, **changes)


def validate_case(case: GridCase) -> None:
    if len(set(case.buses)) != len(case.buses):
        raise CaseValidationError("duplicate bus ids")
    known = set(case.buses)
    ids = [ln.id for ln in case.lines]
    if len(set(ids)) != len(ids):
        raise CaseValidationError("duplicate line ids")
    for ln in case.lines:
        if ln.from_bus not in known or ln.to_bus not in known:
            raise CaseValidationError(f"line {ln.id} references an unknown bus")
        if ln.from_bus == ln.to_bus:
            raise CaseValidationError(f"line {ln.id} is a self-loop")
        if not ln.x > 0:
            raise CaseValidationError(f"line {ln.id}: reactance must be positive, got {ln.x}")
        lo, hi = ln.limits
        if lo > hi:
            raise CaseValidationError(f"line {ln.id}: flow limits out of order")

    def _check_unique(buses, what):
        for b in buses:
            if b not in known:
                raise CaseValidationError(f"{what} at unknown bus {b}")
        if len(set(buses)) != len(buses):
            raise CaseValidationError(f"more than one {what} at a bus")

    _check_unique(case.generator_buses, "generator")
    _check_unique(case.storage_buses, "storage")
    _check_unique(case.disturbance_buses, "disturbance")
    _check_unique(tuple(ld.bus for ld in case.loads), "load")
    both = set(case.generator_buses) & set(case.storage_buses)
    if both:
        raise CaseValidationError(
            f"bus {sorted(both)[0]} hosts both a generator and a storage"
        )
    for g in case.generators:
        if g.u_min > g.u_max:
            raise CaseValidationError(f"generator at bus {g.bus}: u_min > u_max")
        if g.ramp_frac < 0:
            raise CaseValidationError(f"generator at bus {g.bus}: negative ramp_frac")
    for s in case.storages:
        for lo, hi, name in (
            (s.e_min, s.e_max, "e"),
            (s.s_min, s.s_max, "s"),
            (s.e_term_min, s.e_term_max, "e_term"),
        ):
            if lo > hi:
                raise CaseValidationError(f"storage at bus {s.bus}: {name} bounds out of order")
        if s.e_ic_var < 0:
            raise CaseValidationError(f"storage at bus {s.bus}: negative e_ic_var")
    if case.reference_bus is not None and case.reference_bus not in known:
        raise CaseValidationError(f"reference bus {case.reference_bus} is not a bus")
    if case.n_bus > 1 and not is_connected(case):
        raise CaseValidationError("network graph is not connected")


def is_connected(case: GridCase) -> bool:
    idx = case.bus_index
    rows = [idx[ln.from_bus] for ln in case.lines]
    cols = [idx[ln.to_bus] for ln in case.lines]
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(case.n_bus, case.n_bus))
    n_comp, _ = connected_components(adj, directed=False)
    return n_comp == 1


def _require(entry: Mapping, key: str, where: str, kind=float):
    if key not in entry:
        raise CaseError(f"{where}: missing field '{key}'")
    value = entry[key]
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise CaseError(f"{where}: field '{key}' has invalid value {value!r}") from None


def _optional(entry: Mapping, key: str, where: str):
    if entry.get(key) is None:
        return None
    return _require(entry, key, where)


def parse_case(source: str | Path | Mapping[str, Any]) -> GridCase:
    """Parse a case document (path, JSON text or already-decoded mapping)."""
    source_dir = None
    if isinstance(source, Mapping):
        doc = source
    else:
        path = Path(source)
        if isinstance(source, Path) or (len(str(source)) < 4096 and path.is_file()):
            if not path.is_file():
                raise FileNotFoundError(f"case file not found: {path}")
            doc = json.loads(path.read_text(encoding="utf-8"))
            source_dir = path.resolve().parent
        else:
            doc = json.loads(str(source))
    if not isinstance(doc, Mapping):
        raise CaseError("case document must be a JSON object")
    for key in ("buses", "lines"):
        if key not in doc:
            raise CaseError(f"missing top-level field '{key}'")

    try:
        buses = tuple(int(b) for b in doc["buses"])
    except (TypeError, ValueError):
        raise CaseError("field 'buses' must be a list of integer ids") from None

    lines = []
    for k, ln in enumerate(doc["lines"]):
        where = f"lines[{k}]"
        lines.append(
            Line(
                id=_require(ln, "id", where, int),
                from_bus=_require(ln, "from", where, int),
                to_bus=_require(ln, "to", where, int),
                x=_require(ln, "x", where),
                p_line_max=_optional(ln, "p_line_max", where),
                c_min=_optional(ln, "c_min", where),
                c_max=_optional(ln, "c_max", where),
            )
        )
    lines.sort(key=lambda ln: ln.id)

    generators = []
    for k, g in enumerate(doc.get("generators", [])):
        where = f"generators[{k}]"
        generators.append(
            Generator(
                bus=_require(g, "bus", where, int),
                u_min=_require(g, "u_min", where),
                u_max=_require(g, "u_max", where),
                ramp_frac=_require(g, "ramp_frac", where),
                gamma2=_require(g, "gamma2", where),
                gamma1=_require(g, "gamma1", where),
                gamma0=_require(g, "gamma0", where),
                p_max=_optional(g, "p_max", where),
            )
        )

    storages = []
    for k, s in enumerate(doc.get("storages", [])):
        where = f"storages[{k}]"
        fields = ("e_min", "e_max", "s_min", "s_max", "e_ic_mean", "e_ic_var",
                  "e_term_min", "e_term_max")
        storages.append(
            Storage(bus=_require(s, "bus", where, int),
                    **{f: _require(s, f, where) for f in fields})
        )

    disturbances = []
    for k, d in enumerate(doc.get("disturbances", [])):
        where = f"disturbances[{k}]"
        if "forecast" not in d:
            raise CaseError(f"{where}: missing field 'forecast'")
        kind = d.get("kind", "generation")
        if kind not in ("generation", "load"):
            raise CaseError(f"{where}: field 'kind' must be 'generation' or 'load'")
        disturbances.append(
            Disturbance(
                bus=_require(d, "bus", where, int),
                forecast=d["forecast"],
                d_nom=_optional(d, "d_nom", where),
                capacity=_optional(d, "capacity", where),
                kind=kind,
            )
        )

    loads = [
        Load(bus=_require(ld, "bus", f"loads[{k}]", int), d_nom=_require(ld, "d_nom", f"loads[{k}]"))
        for k, ld in enumerate(doc.get("loads", []))
    ]

    ref = doc.get("reference_bus")
    return GridCase(
        buses=buses,
        lines=tuple(lines),
        generators=tuple(generators),
        storages=tuple(storages),
        disturbances=tuple(disturbances),
        loads=tuple(loads),
        name=str(doc.get("name", "case")),
        base_mva=float(doc.get("base_mva", 100.0)),
        reference_bus=None if ref is None else int(ref),
        source_dir=source_dir,
    )


BUILTIN_CASES = ("case5", "case39")


def load_case(name_or_path: str | Path) -> GridCase:
    """Load a shipped fixture by name (``case5``, ``case39``) or a JSON path."""
    name = str(name_or_path)
    if name in BUILTIN_CASES:
        res = resources.files("stochopf") / "data" / f"{name}.json"
        with resources.as_file(res) as p:
            return parse_case(Path(p))
    return parse_case(Path(name_or_path))


def case_to_dict(case: GridCase) -> dict[str, Any]:
    """Inverse of :func:`parse_case` (forecast references kept verbatim)."""
    def _drop_none(d):
        return {k: v for k, v in d.items() if v is not None}

    return {
        "name": case.name,
        "base_mva": case.base_mva,
        "reference_bus": case.reference_bus,
        "buses": list(case.buses),
        "lines": [
            _drop_none({"id": ln.id, "from": ln.from_bus, "to": ln.to_bus, "x": ln.x,
                        "p_line_max": ln.p_line_max, "c_min": ln.c_min, "c_max": ln.c_max})
            for ln in case.lines
        ],
        "generators": [
            _drop_none({"bus": g.bus, "u_min": g.u_min, "u_max": g.u_max, "ramp_frac": g.ramp_frac,
                        "gamma2": g.gamma2, "gamma1": g.gamma1, "gamma0": g.gamma0,
                        "p_max": g.p_max})
            for g in case.generators
        ],
        "storages": [dict(vars(s)) for s in case.storages],
        "disturbances": [
            _drop_none({"bus": d.bus, "forecast": d.forecast, "d_nom": d.d_nom,
                        "capacity": d.capacity, "kind": d.kind})
            for d in case.disturbances
        ],
        "loads": [{"bus": ld.bus, "d_nom": ld.d_nom} for ld in case.loads],
    }


def incidence_matrix(case: GridCase) -> np.ndarray:
    """Bus-by-line incidence K with +1 at the from-bus and -1 at the to-bus."""
    idx = case.bus_index
    K = np.zeros((case.n_bus, len(case.lines)))
    for l, ln in enumerate(case.lines):
        K[idx[ln.from_bus], l] = 1.0
        K[idx[ln.to_bus], l] = -1.0
    return K


@dataclass(frozen=True)
class Ptdf:
    """Line-by-bus sensitivity of DC line flows to nodal net injections."""

    matrix: np.ndarray
    line_ids: tuple[int, ...]
    buses: tuple[int, ...]
    reference_bus: int

    def flows(self, injections: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(injections, dtype=float)


def compute_ptdf(case: GridCase, reference_bus: int | None = None) -> Ptdf:
    """PTDF from the reduced nodal susceptance matrix.

    The reference bus absorbs any imbalance, so only balanced injections
    give reference-independent flows.
    """
    if reference_bus is None:
        reference_bus = case.default_reference()
    idx = case.bus_index
    if reference_bus not in idx:
        raise ValueError(f"reference bus {reference_bus} is not in the case")
    K = incidence_matrix(case)
    b = np.array([1.0 / ln.x for ln in case.lines])
    B = (K * b) @ K.T
    keep = np.array([i for i in range(case.n_bus) if i != idx[reference_bus]], dtype=int)
    B_red = B[np.ix_(keep, keep)]
    try:
        cho = scipy.linalg.cho_factor(B_red)
        X_red = scipy.linalg.cho_solve(cho, np.eye(len(keep)))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            "reduced susceptance matrix is singular; is the network connected?"
        ) from exc
    X = np.zeros((case.n_bus, case.n_bus))
    X[np.ix_(keep, keep)] = X_red
    Phi = (b[:, None] * K.T) @ X
    return Ptdf(
        matrix=Phi,
        line_ids=tuple(ln.id for ln in case.lines),
        buses=case.buses,
        reference_bus=reference_bus,
    )
