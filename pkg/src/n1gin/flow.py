"""Linearised load flow and the exhaustive n-1 switching search.

The electrical model ignores reactive power and losses: a station drawing
``P`` kW at nominal voltage ``V`` injects a current of ``1000 * P / V`` amperes,
and the voltage drop over a cable is ``I * Z``.

The switching search works on *parts*: the grid minus the failed cable is cut
open at every primary substation (their voltage is fixed, so flows on either
side are independent). Each part needs its own spanning tree, so parts are
searched independently and the results of untouched parts are reused across
contingencies.
"""

from __future__ import annotations

import enum
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .grid import FeatureSet, Grid, _served_forest

DEFAULT_MAX_DEVIATION = 0.05


class FlowState(str, enum.Enum):
    RADIAL = "RadialInitial"
    CLOSED = "Closed"


class NonRadialError(ValueError):
    pass


class SingularGridError(ValueError):
    """A closed-state component has no primary substation to fix its voltage."""


@dataclass(frozen=True, eq=False)
class FlowSolution:
    edge_current: np.ndarray  # A, signed along the sorted endpoint pair (u -> v positive)
    node_voltage: np.ndarray  # V; 0 for de-energised nodes
    state: FlowState
    energized: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.energized is None:
            object.__setattr__(self, "energized", np.ones(len(self.node_voltage), dtype=bool))


@dataclass(frozen=True)
class LimitReport:
    overloaded_edges: frozenset[int]
    voltage_violations: frozenset[int]

    @property
    def feasible(self) -> bool:
        return not self.overloaded_edges and not self.voltage_violations


@dataclass(frozen=True)
class SwitchOption:
    failed_edge: int
    open_set: frozenset[int]

    def to_dict(self) -> dict:
        return {"failed_edge": self.failed_edge, "open_set": sorted(self.open_set)}


@dataclass(frozen=True)
class N1Result:
    label: int
    witness: dict[int, Optional[SwitchOption]]
    elapsed: float  # seconds, wall clock

    def __iter__(self):
        # allows ``label, witness = label_n1(grid)[:2]``-style unpacking
        return iter((self.label, self.witness, self.elapsed))

    def __getitem__(self, i):
        return (self.label, self.witness, self.elapsed)[i]

    def witness_dict(self) -> dict[str, Optional[list[int]]]:
        return {str(e): (None if o is None else sorted(o.open_set)) for e, o in sorted(self.witness.items())}


def injections(grid: Grid) -> np.ndarray:
    """Per-node load current in amperes."""
    return 1000.0 * grid.loads / grid.nominal_voltages


def radial_flow(grid: Grid, open_set: Iterable[int], *, allow_unserved: bool = False) -> FlowSolution:
    """Exact tree traversal of the radial state obtained by opening ``open_set``."""
    open_set = set(open_set)
    closed = [c.id for c in grid.edges if c.id not in open_set]
    owner, parent_edge, order, cyclic = _served_forest(grid, closed)
    if cyclic:
        raise NonRadialError("open set leaves a cycle or a path between two sources")
    inj = injections(grid)
    unserved = [v for v, o in enumerate(owner) if o == -1]
    for v in unserved:
        if not allow_unserved or grid.loads[v] != 0:
            raise NonRadialError(f"node {v} is not served by any primary substation")

    current = np.zeros(grid.n_edges)
    down = inj.copy()
    ends = grid.endpoints
    for v in reversed(order):
        e = parent_edge[v]
        if e < 0:
            continue
        p = int(ends[e, 0] if ends[e, 1] == v else ends[e, 1])
        current[e] = down[v] if ends[e, 0] == p else -down[v]
        down[p] += down[v]

    voltage = np.zeros(grid.n_nodes)
    z = grid.impedances
    for v in order:
        e = parent_edge[v]
        if e < 0:
            voltage[v] = grid.nominal_voltages[v]
        else:
            p = int(ends[e, 0] if ends[e, 1] == v else ends[e, 1])
            voltage[v] = voltage[p] - abs(current[e]) * z[e]
    energized = np.array([o != -1 for o in owner], dtype=bool)
    return FlowSolution(current, voltage, FlowState.RADIAL, energized)


def closed_flow(grid: Grid) -> FlowSolution:
    """Meshed flow with every switch closed, from the weighted Laplacian."""
    n = grid.n_nodes
    src = grid.source_mask
    owner, _, _, _ = _served_forest(grid, [c.id for c in grid.edges])
    if any(o == -1 for o in owner):
        raise SingularGridError("closed graph has a component without a primary substation")
    ends = grid.endpoints
    g = 1.0 / grid.impedances
    rows = np.concatenate([ends[:, 0], ends[:, 1], ends[:, 0], ends[:, 1]])
    cols = np.concatenate([ends[:, 1], ends[:, 0], ends[:, 0], ends[:, 1]])
    vals = np.concatenate([-g, -g, g, g])
    lap = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))

    free = np.flatnonzero(~src)
    fixed = np.flatnonzero(src)
    voltage = np.zeros(n)
    voltage[fixed] = grid.nominal_voltages[fixed]
    if free.size:
        rhs = -injections(grid)[free] - lap[free][:, fixed] @ voltage[fixed]
        a = lap[free][:, free].tocsc()
        voltage[free] = np.atleast_1d(spsolve(a, rhs))
    current = (voltage[ends[:, 0]] - voltage[ends[:, 1]]) * g
    return FlowSolution(current, voltage, FlowState.CLOSED)


def source_injection(flow: FlowSolution, grid: Grid) -> float:
    """Total current leaving the primary substations."""
    total = 0.0
    ends = grid.endpoints
    for e in range(grid.n_edges):
        u, v = ends[e]
        if grid.source_mask[u]:
            total += flow.edge_current[e]
        if grid.source_mask[v]:
            total -= flow.edge_current[e]
    return total


def check_limits(flow: FlowSolution, grid: Grid, max_deviation: float = DEFAULT_MAX_DEVIATION) -> LimitReport:
    if flow.edge_current.shape != (grid.n_edges,) or flow.node_voltage.shape != (grid.n_nodes,):
        raise ValueError("flow solution does not match grid dimensions")
    over = np.flatnonzero(np.abs(flow.edge_current) > grid.nominal_currents)
    vnom = grid.nominal_voltages
    dev = np.abs(vnom - flow.node_voltage) / vnom
    bad = np.flatnonzero((dev > max_deviation) & flow.energized)
    return LimitReport(frozenset(int(e) for e in over), frozenset(int(v) for v in bad))


# --- switching search -------------------------------------------------------

_ROOT = 0


class _Part:
    """One source-separated part: a multigraph whose node 0 stands for every source."""

    __slots__ = ("edges", "n", "adj", "_ends", "inj", "z", "cap", "root_v", "vnom", "n_open", "dead")

    def __init__(self, grid: Grid, edge_ids: list[int], local: dict[int, int], nodes: list[int]):
        self.edges = edge_ids
        self.n = len(nodes) + 1
        ends = grid.endpoints
        src = grid.source_mask
        self.adj: list[list[tuple[int, int]]] = [[] for _ in range(self.n)]
        self._ends: list[tuple[int, int]] = []
        self.root_v = [0.0] * len(edge_ids)
        touches_source = False
        for k, e in enumerate(edge_ids):
            u, v = int(ends[e, 0]), int(ends[e, 1])
            lu = _ROOT if src[u] else local[u]
            lv = _ROOT if src[v] else local[v]
            if src[u] or src[v]:
                touches_source = True
                s = u if src[u] else v
                self.root_v[k] = float(grid.nominal_voltages[s])
            self._ends.append((lu, lv))
            self.adj[lu].append((lv, k))
            # a source-to-source cable is a self-loop on the root and must stay open
            if lv != lu:
                self.adj[lv].append((lu, k))
        inj = injections(grid)
        self.inj = [0.0] + [float(inj[v]) for v in nodes]
        self.vnom = [0.0] + [float(grid.nominal_voltages[v]) for v in nodes]
        self.z = [float(grid.impedances[e]) for e in edge_ids]
        self.cap = [float(grid.nominal_currents[e]) for e in edge_ids]
        self.n_open = len(edge_ids) - len(nodes)
        self.dead = not touches_source

    def bridges(self, closed: list[bool]) -> set[int]:
        """Local edge indices whose removal disconnects the closed multigraph."""
        n = self.n
        disc = [-1] * n
        low = [0] * n
        out: set[int] = set()
        t = 0
        for start in range(n):
            if disc[start] != -1:
                continue
            disc[start] = low[start] = t
            t += 1
            stack = [(start, -1, iter(self.adj[start]))]
            while stack:
                x, pe, it = stack[-1]
                advanced = False
                for y, k in it:
                    if not closed[k] or k == pe:
                        continue
                    if disc[y] == -1:
                        disc[y] = low[y] = t
                        t += 1
                        stack.append((y, k, iter(self.adj[y])))
                        advanced = True
                        break
                    if disc[y] < low[x]:
                        low[x] = disc[y]
                if not advanced:
                    stack.pop()
                    if stack:
                        px = stack[-1][0]
                        if low[x] < low[px]:
                            low[px] = low[x]
                        if low[x] > disc[px]:
                            out.add(pe)
        return out

    def connected(self, closed: list[bool]) -> bool:
        seen = [False] * self.n
        seen[_ROOT] = True
        queue = deque([_ROOT])
        count = 1
        while queue:
            x = queue.popleft()
            for y, k in self.adj[x]:
                if closed[k] and not seen[y]:
                    seen[y] = True
                    count += 1
                    queue.append(y)
        return count == self.n

    def feasible(self, closed: list[bool], max_deviation: float) -> bool:
        """Flow on the spanning tree given by ``closed``; True if within limits."""
        n = self.n
        parent = [-1] * n
        pedge = [-1] * n
        order = [_ROOT]
        seen = [False] * n
        seen[_ROOT] = True
        i = 0
        while i < len(order):
            x = order[i]
            i += 1
            for y, k in self.adj[x]:
                if closed[k] and not seen[y]:
                    seen[y] = True
                    parent[y] = x
                    pedge[y] = k
                    order.append(y)
        down = list(self.inj)
        cap = self.cap
        for y in reversed(order[1:]):
            k = pedge[y]
            if down[y] > cap[k]:
                return False
            down[parent[y]] += down[y]
        volt = [0.0] * n
        z = self.z
        vnom = self.vnom
        for y in order[1:]:
            k = pedge[y]
            p = parent[y]
            vp = self.root_v[k] if p == _ROOT else volt[p]
            volt[y] = vp - down[y] * z[k]
            if abs(vnom[y] - volt[y]) / vnom[y] > max_deviation:
                return False
        return True

    def _chains(self, closed: list[bool]):
        """Decompose the cyclic core into chains between junction nodes.

        Returns ``(loops, chains, n_junctions)``: self-loops (always open) and
        chains as ``(a, b, local edge ids in walk order)`` with junction ids
        ``a`` and ``b``. Bridges are in every spanning tree and are left out.
        """
        loops = [k for k in range(len(self.edges)) if self._ends[k][0] == self._ends[k][1]]
        br = self.bridges(closed)
        core = [closed[k] and k not in br and self._ends[k][0] != self._ends[k][1]
                for k in range(len(self.edges))]
        deg = [0] * self.n
        for k, c in enumerate(core):
            if c:
                u, v = self._ends[k]
                deg[u] += 1
                deg[v] += 1
        junction = {v: i for i, v in enumerate(
            x for x in range(self.n) if deg[x] and (deg[x] != 2 or x == _ROOT))}
        used = [False] * len(self.edges)
        chains = []

        def walk(start: int) -> None:
            for y0, k0 in self.adj[start]:
                if not core[k0] or used[k0]:
                    continue
                path = [k0]
                used[k0] = True
                y = y0
                while y not in junction:
                    k = next(k for _, k in self.adj[y] if core[k] and not used[k])
                    used[k] = True
                    path.append(k)
                    y = self._ends[k][1] if self._ends[k][0] == y else self._ends[k][0]
                chains.append((junction[start], junction[y], path))

        for v in list(junction):
            walk(v)
        # cycles made only of degree-two nodes get their smallest node as junction
        for k in range(len(self.edges)):
            if core[k] and not used[k]:
                v = min(self._ends[k])
                junction[v] = len(junction)
                walk(v)
        return loops, chains, len(junction)

    def search(self, max_deviation: float) -> Optional[list[int]]:
        """A feasible open set (local indices), or None if none exists.

        A spanning tree opens every self-loop, keeps the bridges, cuts some
        chains so the junction skeleton becomes a forest, and opens exactly one
        edge of each cut chain. Skeleton forests are enumerated first; cut
        positions are then searched depth first. A partially decided state
        serves a subtree of the final tree, and with non-negative loads its
        currents and voltage drops only grow as edges are added, so every
        partial state is checked and each undecided chain keeps only the
        positions that still pass (forward checking).
        """
        if self.dead:
            return [] if all(x == 0 for x in self.inj) else None
        m = len(self.edges)
        closed = [True] * m
        if self.n_open < 0 or not self.connected(closed):
            return None
        loops, chains, n_junctions = self._chains(closed)
        n_cut = self.n_open - len(loops)
        for k in loops:
            closed[k] = False
        if n_cut == 0:
            return sorted(loops) if self.feasible(closed, max_deviation) else None

        def candidates(i: int) -> list[int]:
            path = chains[i][2]
            out = []
            for k in path:
                closed[k] = True
            for t, k in enumerate(path):
                closed[k] = False
                if self.feasible(closed, max_deviation):
                    out.append(t)
                closed[k] = True
            for k in path:
                closed[k] = False
            return out

        chosen: list[int] = []

        def place(todo: list[int]) -> bool:
            if not todo:
                return True
            best = None
            for i in todo:
                cand = candidates(i)
                if not cand:
                    return False
                if best is None or len(cand) < len(best[1]):
                    best = (i, cand)
            i, cand = best
            rest = [j for j in todo if j != i]
            path = chains[i][2]
            for t in cand:
                for k in path:
                    closed[k] = True
                closed[path[t]] = False
                chosen.append(path[t])
                if place(rest):
                    return True
                chosen.pop()
                for k in path:
                    closed[k] = False
            return False

        keep_needed = len(chains) - n_cut

        def skeleton(i: int, parent: list[int], cut: list[int]) -> bool:
            if len(cut) == n_cut:
                for j in range(i, len(chains)):
                    ra, rb = _find(parent, chains[j][0]), _find(parent, chains[j][1])
                    if ra == rb:
                        return False
                    parent = parent.copy()
                    parent[ra] = rb
                for j in cut:
                    for k in chains[j][2]:
                        closed[k] = False
                ok = self.feasible(closed, max_deviation) and place(list(cut))
                if not ok:
                    for j in cut:
                        for k in chains[j][2]:
                            closed[k] = True
                return ok
            if i == len(chains) or len(chains) - i < n_cut - len(cut):
                return False
            a, b = _find(parent, chains[i][0]), _find(parent, chains[i][1])
            if a != b and (i - len(cut)) < keep_needed:
                joined = parent.copy()
                joined[a] = b
                if skeleton(i + 1, joined, cut):
                    return True
            return skeleton(i + 1, parent, cut + [i])

        if not skeleton(0, list(range(n_junctions)), []):
            return None
        return sorted(loops + chosen)


def _find(parent: list[int], x: int) -> int:
    while parent[x] != x:
        x = parent[x]
    return x


def _partition(grid: Grid, failed: Optional[int]) -> list[tuple[list[int], list[int]]]:
    """Split the grid (minus ``failed``) at primary substations.

    Returns ``(edge ids, non-source node ids)`` per part, both sorted.
    """
    n = grid.n_nodes
    src = grid.source_mask
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    ends = grid.endpoints
    for e in range(grid.n_edges):
        if e == failed:
            continue
        u, v = int(ends[e, 0]), int(ends[e, 1])
        if not src[u] and not src[v]:
            ru, rv = find(u), find(v)
            if ru != rv:
                parent[max(ru, rv)] = min(ru, rv)
    groups: dict[object, tuple[list[int], list[int]]] = {}
    for v in range(n):
        if not src[v]:
            groups.setdefault(find(v), ([], []))[1].append(v)
    for e in range(grid.n_edges):
        if e == failed:
            continue
        u, v = int(ends[e, 0]), int(ends[e, 1])
        if src[u] and src[v]:
            groups[("ss", e)] = ([e], [])
        else:
            x = v if src[u] else u
            groups[find(x)][0].append(e)
    return list(groups.values())


def _search_parts(grid, failed, max_deviation, cache) -> Optional[frozenset[int]]:
    opened: list[int] = []
    parts = _partition(grid, failed)
    for edge_ids, nodes in parts:
        key = tuple(edge_ids) if edge_ids else ("nodes", tuple(nodes))
        if key in cache:
            res = cache[key]
        else:
            local = {v: i + 1 for i, v in enumerate(nodes)}
            part = _Part(grid, edge_ids, local, nodes)
            found = part.search(max_deviation)
            res = None if found is None else [edge_ids[k] for k in found]
            cache[key] = res
        if res is None:
            return None
        opened.extend(res)
    return frozenset(opened)


def find_switch_option(
    grid: Grid,
    failed_edge: int,
    max_deviation: float = DEFAULT_MAX_DEVIATION,
    *,
    _cache: Optional[dict] = None,
) -> Optional[SwitchOption]:
    """A radial reconfiguration that survives ``failed_edge``, or None.

    Every cable is assumed switchable. Only open sets that leave a spanning
    forest rooted at the primary substations are considered, and the search
    only discards states that provably cannot be completed, so ``None`` means
    no feasible option exists. The option returned is deterministic.
    """
    if not (isinstance(failed_edge, (int, np.integer)) and 0 <= failed_edge < grid.n_edges):
        raise IndexError(f"invalid edge id {failed_edge!r}")
    opened = _search_parts(grid, int(failed_edge), max_deviation, {} if _cache is None else _cache)
    if opened is None:
        return None
    return SwitchOption(int(failed_edge), opened)


def _contingency(args):
    grid, e, max_deviation = args
    return find_switch_option(grid, e, max_deviation)


def label_n1(
    grid: Grid,
    max_deviation: float = DEFAULT_MAX_DEVIATION,
    *,
    workers: int = 1,
    full_witness: bool = True,
) -> N1Result:
    """Label 1 iff every single-cable failure has a feasible switching option.

    With ``full_witness=False`` the search stops at the first contingency that
    has no option; the witness then only covers the contingencies visited.
    """
    t0 = time.perf_counter()
    if workers > 1 and grid.n_edges > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            found = list(pool.map(_contingency, [(grid, e, max_deviation) for e in range(grid.n_edges)]))
    else:
        cache: dict = {}
        found = []
        for e in range(grid.n_edges):
            found.append(find_switch_option(grid, e, max_deviation, _cache=cache))
            if found[-1] is None and not full_witness:
                break
    witness = {e: opt for e, opt in enumerate(found)}
    label = int(len(found) == grid.n_edges and all(opt is not None for opt in found))
    return N1Result(label, witness, time.perf_counter() - t0)


# --- features ---------------------------------------------------------------

def compute_features(grid: Grid) -> FeatureSet:
    radial = radial_flow(grid, grid.normally_open)
    closed = closed_flow(grid)
    node = np.column_stack([grid.loads, radial.node_voltage, closed.node_voltage, grid.degrees])
    edge = np.column_stack(
        [grid.impedances, grid.nominal_currents, np.abs(radial.edge_current), np.abs(closed.edge_current)]
    )
    return FeatureSet(node, edge)
