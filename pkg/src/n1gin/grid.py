"""Graph model of a medium-voltage grid: stations, cables and normally-open switches.

A :class:`Grid` is immutable. Derived arrays (endpoints, loads, adjacency) are
computed lazily and cached on the instance, so a grid can be shared freely
between workers.
"""

from __future__ import annotations

import enum
import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class StationKind(str, enum.Enum):
    PRIMARY = "PrimarySubstation"
    DISTRIBUTION = "DistributionStation"


@dataclass(frozen=True)
class Station:
    id: int
    kind: StationKind
    load: float = 0.0  # kW
    nominal_voltage: float = 10500.0  # V

    @property
    def is_source(self) -> bool:
        return self.kind is StationKind.PRIMARY


@dataclass(frozen=True)
class Cable:
    """Undirected cable; endpoints are stored as a sorted pair."""

    id: int
    endpoints: tuple[int, int]
    impedance: float  # ohm
    nominal_current: float  # A

    def __post_init__(self):
        u, v = self.endpoints
        if u > v:
            object.__setattr__(self, "endpoints", (v, u))

    def other(self, node: int) -> int:
        u, v = self.endpoints
        return v if node == u else u


class GridFormatError(ValueError):
    """Raised when a grid document cannot be parsed."""


@dataclass(frozen=True)
class ValidationReport:
    problems: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.problems

    def __bool__(self) -> bool:
        return self.ok

    def __contains__(self, text: str) -> bool:
        return any(text in p for p in self.problems)


@dataclass(frozen=True)
class Grid:
    nodes: tuple[Station, ...]
    edges: tuple[Cable, ...]
    normally_open: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))
        object.__setattr__(self, "normally_open", frozenset(self.normally_open))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def endpoints(self) -> np.ndarray:
        """(|E|, 2) int array of sorted endpoints."""
        if not self.edges:
            return np.zeros((0, 2), dtype=np.int64)
        return np.array([c.endpoints for c in self.edges], dtype=np.int64)

    @cached_property
    def loads(self) -> np.ndarray:
        return np.array([s.load for s in self.nodes], dtype=float)

    @cached_property
    def nominal_voltages(self) -> np.ndarray:
        return np.array([s.nominal_voltage for s in self.nodes], dtype=float)

    @cached_property
    def impedances(self) -> np.ndarray:
        return np.array([c.impedance for c in self.edges], dtype=float)

    @cached_property
    def nominal_currents(self) -> np.ndarray:
        return np.array([c.nominal_current for c in self.edges], dtype=float)

    @cached_property
    def source_mask(self) -> np.ndarray:
        return np.array([s.is_source for s in self.nodes], dtype=bool)

    @cached_property
    def sources(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.source_mask))

    @cached_property
    def incidence(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        """Per node, the (neighbor, edge id) pairs in edge-id order."""
        inc: list[list[tuple[int, int]]] = [[] for _ in self.nodes]
        for c in self.edges:
            u, v = c.endpoints
            if 0 <= u < len(inc) and 0 <= v < len(inc):
                inc[u].append((v, c.id))
                if v != u:
                    inc[v].append((u, c.id))
        return tuple(tuple(x) for x in inc)

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.array([len({u for u, _ in nb}) for nb in self.incidence], dtype=float)

    def node(self, v: int) -> Station:
        _check_node(self, v)
        return self.nodes[v]


def _check_node(grid: Grid, v: int) -> None:
    if not (isinstance(v, (int, np.integer)) and 0 <= v < grid.n_nodes):
        raise IndexError(f"invalid node id {v!r} for grid with {grid.n_nodes} nodes")


def neighbors(grid: Grid, v: int) -> set[int]:
    """Nodes sharing a cable with ``v`` when every switch is closed."""
    _check_node(grid, v)
    return {u for u, _ in grid.incidence[v]}


def k_hop_neighborhood(grid: Grid, v: int, k: int) -> tuple[frozenset[int], frozenset[int]]:
    """Nodes at most ``k`` hops from ``v`` and the edges with both ends among them."""
    _check_node(grid, v)
    if k < 1:
        raise ValueError("k must be >= 1")
    dist = {v: 0}
    queue = deque([v])
    while queue:
        x = queue.popleft()
        if dist[x] == k:
            continue
        for y, _ in grid.incidence[x]:
            if y not in dist:
                dist[y] = dist[x] + 1
                queue.append(y)
    ball = frozenset(dist)
    edges = frozenset(c.id for c in grid.edges if c.endpoints[0] in ball and c.endpoints[1] in ball)
    return ball, edges


def _served_forest(grid: Grid, closed: Iterable[int]):
    """BFS the closed-edge graph from every source.

    Returns ``(owner, parent_edge, order, cyclic)`` where ``owner[v]`` is the
    source feeding ``v`` (-1 when unreached) and ``cyclic`` flags a cycle or a
    path between two sources.
    """
    closed = set(closed)
    n = grid.n_nodes
    owner = [-1] * n
    parent_edge = [-1] * n
    order: list[int] = []
    cyclic = False
    for s in grid.sources:
        if owner[s] != -1:
            cyclic = True
            continue
        owner[s] = s
        order.append(s)
        queue = deque([s])
        while queue:
            x = queue.popleft()
            for y, e in grid.incidence[x]:
                if e not in closed or e == parent_edge[x]:
                    continue
                if owner[y] != -1:
                    cyclic = True
                    continue
                owner[y] = s
                parent_edge[y] = e
                order.append(y)
                queue.append(y)
    return owner, parent_edge, order, cyclic


def is_radial(grid: Grid, open_set: Iterable[int], *, allow_unserved: bool = False) -> bool:
    """True iff the grid minus ``open_set`` is a forest with one source per tree.

    With ``allow_unserved`` nodes cut off from every source are tolerated when
    they carry no load; such islands are ignored entirely.
    """
    open_set = set(open_set)
    closed = [c.id for c in grid.edges if c.id not in open_set]
    owner, _, _, cyclic = _served_forest(grid, closed)
    if cyclic:
        return False
    for v, o in enumerate(owner):
        if o == -1 and not (allow_unserved and grid.nodes[v].load == 0):
            return False
    return True


def _connected(grid: Grid) -> bool:
    if grid.n_nodes == 0:
        return False
    seen = {0}
    queue = deque([0])
    while queue:
        x = queue.popleft()
        for y, _ in grid.incidence[x]:
            if y not in seen:
                seen.add(y)
                queue.append(y)
    return len(seen) == grid.n_nodes


def validate_grid(grid: Grid) -> ValidationReport:
    problems: list[str] = []
    n = grid.n_nodes
    if [s.id for s in grid.nodes] != list(range(n)):
        problems.append("node ids must be unique and dense in [0, |V|)")
    if not any(s.is_source for s in grid.nodes):
        problems.append("no primary substation")
    for s in grid.nodes:
        if not (math.isfinite(s.load) and s.load >= 0):
            problems.append(f"node {s.id}: load must be finite and non-negative")
        elif s.is_source and s.load != 0:
            problems.append(f"node {s.id}: primary substation must have zero load")
        if not (math.isfinite(s.nominal_voltage) and s.nominal_voltage > 0):
            problems.append(f"node {s.id}: nominal voltage must be positive")
    if [c.id for c in grid.edges] != list(range(grid.n_edges)):
        problems.append("edge ids must be unique and dense in [0, |E|)")
    seen_pairs: dict[tuple[int, int], int] = {}
    endpoints_ok = True
    for c in grid.edges:
        u, v = c.endpoints
        if not (0 <= u < n and 0 <= v < n):
            problems.append(f"edge {c.id}: endpoint out of range")
            endpoints_ok = False
            continue
        if u == v:
            problems.append(f"edge {c.id}: self-loop")
        if c.endpoints in seen_pairs:
            problems.append(f"duplicate edge {c.endpoints} (edges {seen_pairs[c.endpoints]} and {c.id})")
        seen_pairs.setdefault(c.endpoints, c.id)
        if not (math.isfinite(c.impedance) and c.impedance > 0):
            problems.append(f"edge {c.id}: impedance must be > 0")
        if not (math.isfinite(c.nominal_current) and c.nominal_current > 0):
            problems.append(f"edge {c.id}: nominal current must be > 0")
    unknown = sorted(e for e in grid.normally_open if not 0 <= e < grid.n_edges)
    if unknown:
        problems.append(f"normally-open switches reference unknown edges {unknown}")
    if endpoints_ok and n:
        if not _connected(grid):
            problems.append("closed graph is not connected")
        if grid.sources:
            closed = [c.id for c in grid.edges if c.id not in grid.normally_open]
            owner, _, _, cyclic = _served_forest(grid, closed)
            if cyclic:
                problems.append("radial state contains a cycle or joins two sources")
            unserved = [v for v, o in enumerate(owner) if o == -1]
            if unserved:
                problems.append(f"radial state leaves nodes unserved: {unserved[:10]}")
    return ValidationReport(tuple(problems))


@dataclass(frozen=True)
class RouteStats:
    min: int
    avg: float
    max: int

    @property
    def depth(self) -> int:
        """Default GIN depth: the average route length rounded half-up."""
        return int(math.floor(self.avg + 0.5))


def route_lengths(grid: Grid) -> list[int]:
    """Hop counts from each primary substation to the leaf stations it feeds."""
    closed = [c.id for c in grid.edges if c.id not in grid.normally_open]
    owner, parent_edge, order, _ = _served_forest(grid, closed)
    depth = [0] * grid.n_nodes
    children = [0] * grid.n_nodes
    for v in order:
        e = parent_edge[v]
        if e >= 0:
            p = grid.edges[e].other(v)
            depth[v] = depth[p] + 1
            children[p] += 1
    return [
        depth[v]
        for v in order
        if not grid.nodes[v].is_source and children[v] == 0
    ]


def route_length_stats(grids: Sequence[Grid]) -> RouteStats:
    lengths: list[int] = []
    for i, g in enumerate(grids):
        found = route_lengths(g)
        if not found:
            raise ValueError(f"grid {i} has no leaf distribution stations")
        lengths.extend(found)
    return RouteStats(min(lengths), float(np.mean(lengths)), max(lengths))


NODE_FEATURES = ("power_consumption", "voltage_radial", "voltage_closed", "degree")
EDGE_FEATURES = ("impedance", "nominal_current", "current_radial", "current_closed")


@dataclass(frozen=True, eq=False)
class FeatureSet:
    node_features: np.ndarray  # (|V|, 4)
    edge_features: np.ndarray  # (|E|, 4)

    def __post_init__(self):
        nf = np.asarray(self.node_features, dtype=float).reshape(-1, len(NODE_FEATURES))
        ef = np.asarray(self.edge_features, dtype=float).reshape(-1, len(EDGE_FEATURES))
        object.__setattr__(self, "node_features", nf)
        object.__setattr__(self, "edge_features", ef)

    def to_dict(self) -> dict:
        return {
            "node_columns": list(NODE_FEATURES),
            "edge_columns": list(EDGE_FEATURES),
            "node_features": self.node_features.tolist(),
            "edge_features": self.edge_features.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> FeatureSet:
        if doc.get("node_columns") != list(NODE_FEATURES) or doc.get("edge_columns") != list(EDGE_FEATURES):
            raise ValueError("feature document has unexpected columns")
        return cls(np.array(doc["node_features"], dtype=float), np.array(doc["edge_features"], dtype=float))

    def check(self, grid: Grid) -> None:
        if self.node_features.shape[0] != grid.n_nodes or self.edge_features.shape[0] != grid.n_edges:
            raise ValueError("feature rows do not match grid dimensions")
        if not (np.isfinite(self.node_features).all() and np.isfinite(self.edge_features).all()):
            raise ValueError("features contain non-finite values")
        if not np.array_equal(self.node_features[:, 3], grid.degrees):
            raise ValueError("degree column disagrees with the grid")


class Provenance(str, enum.Enum):
    GENERATED = "Generated"
    AUGMENTED = "Augmented"


@dataclass(frozen=True, eq=False)
class LabeledSample:
    grid: Grid
    features: FeatureSet
    label: int  # 1 = n-1, 0 = not n-1
    provenance: Provenance = Provenance.GENERATED
    sample_id: str = ""
    location: str = ""

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")
        self.features.check(self.grid)


# --- JSON -----------------------------------------------------------------

_NODE_FIELDS = {"id", "kind", "load_kw", "nominal_voltage_v"}
_EDGE_FIELDS = {"id", "u", "v", "impedance_ohm", "nominal_current_a"}
_TOP_FIELDS = {"nodes", "edges", "normally_open"}


def grid_to_dict(grid: Grid) -> dict:
    return {
        "nodes": [
            {"id": s.id, "kind": s.kind.value, "load_kw": s.load, "nominal_voltage_v": s.nominal_voltage}
            for s in grid.nodes
        ],
        "edges": [
            {
                "id": c.id,
                "u": c.endpoints[0],
                "v": c.endpoints[1],
                "impedance_ohm": c.impedance,
                "nominal_current_a": c.nominal_current,
            }
            for c in grid.edges
        ],
        "normally_open": sorted(grid.normally_open),
    }


def _exact_keys(obj, expected: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise GridFormatError(f"{where}: expected an object")
    keys = set(obj)
    if keys - expected:
        raise GridFormatError(f"{where}: unknown fields {sorted(keys - expected)}")
    if expected - keys:
        raise GridFormatError(f"{where}: missing fields {sorted(expected - keys)}")


def _number(x, where: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise GridFormatError(f"{where}: expected a number, got {x!r}")
    return float(x)


def _integer(x, where: str) -> int:
    if isinstance(x, bool) or not isinstance(x, int):
        raise GridFormatError(f"{where}: expected an integer, got {x!r}")
    return x


def grid_from_dict(doc) -> Grid:
    _exact_keys(doc, _TOP_FIELDS, "grid")
    nodes = []
    for i, nd in enumerate(doc["nodes"]):
        where = f"nodes[{i}]"
        _exact_keys(nd, _NODE_FIELDS, where)
        try:
            kind = StationKind(nd["kind"])
        except ValueError:
            raise GridFormatError(f"{where}: unknown kind {nd['kind']!r}") from None
        nodes.append(
            Station(
                _integer(nd["id"], where + ".id"),
                kind,
                _number(nd["load_kw"], where + ".load_kw"),
                _number(nd["nominal_voltage_v"], where + ".nominal_voltage_v"),
            )
        )
    edges = []
    for i, ed in enumerate(doc["edges"]):
        where = f"edges[{i}]"
        _exact_keys(ed, _EDGE_FIELDS, where)
        edges.append(
            Cable(
                _integer(ed["id"], where + ".id"),
                (_integer(ed["u"], where + ".u"), _integer(ed["v"], where + ".v")),
                _number(ed["impedance_ohm"], where + ".impedance_ohm"),
                _number(ed["nominal_current_a"], where + ".nominal_current_a"),
            )
        )
    if not isinstance(doc["normally_open"], list):
        raise GridFormatError("normally_open: expected a list")
    opened = frozenset(_integer(e, "normally_open[]") for e in doc["normally_open"])
    nodes.sort(key=lambda s: s.id)
    edges.sort(key=lambda c: c.id)
    return Grid(tuple(nodes), tuple(edges), opened)


def dumps_grid(grid: Grid) -> str:
    return json.dumps(grid_to_dict(grid), indent=1, sort_keys=True)


def loads_grid(text: str) -> Grid:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GridFormatError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return grid_from_dict(doc)


def save_grid(grid: Grid, path: str | Path) -> None:
    Path(path).write_text(dumps_grid(grid) + "\n")


def load_grid(path: str | Path) -> Grid:
    return loads_grid(Path(path).read_text())


def make_grid(
    n_nodes: int,
    edges: Sequence[tuple[int, int]],
    *,
    sources: Iterable[int] = (0,),
    loads: Sequence[float] | float = 0.0,
    impedance: Sequence[float] | float = 1.0,
    nominal_current: Sequence[float] | float = 100.0,
    normally_open: Iterable[int] = (),
    nominal_voltage: float = 10500.0,
) -> Grid:
    """Convenience constructor used by tests, demos and the generator."""
    sources = set(sources)
    loads = [loads] * n_nodes if np.isscalar(loads) else list(loads)
    imp = [impedance] * len(edges) if np.isscalar(impedance) else list(impedance)
    cap = [nominal_current] * len(edges) if np.isscalar(nominal_current) else list(nominal_current)
    nodes = tuple(
        Station(
            v,
            StationKind.PRIMARY if v in sources else StationKind.DISTRIBUTION,
            0.0 if v in sources else float(loads[v]),
            nominal_voltage,
        )
        for v in range(n_nodes)
    )
    cables = tuple(Cable(i, (int(u), int(v)), float(imp[i]), float(cap[i])) for i, (u, v) in enumerate(edges))
    return Grid(nodes, cables, frozenset(normally_open))
