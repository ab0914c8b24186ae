"""Synthetic MV grids, topology augmentation and on-disk datasets.

Grids are built feeder by feeder: every primary substation drives a few
feeders (paths with the odd lateral), and feeder ends are paired by
normally-open tie cables. Loads, impedances and cable ratings are sampled,
features come from the load-flow model and labels from the exhaustive
switching search, so every label is exact.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .flow import DEFAULT_MAX_DEVIATION, compute_features, label_n1
from .grid import (
    Cable,
    FeatureSet,
    Grid,
    LabeledSample,
    Provenance,
    Station,
    StationKind,
    _served_forest,
    dumps_grid,
    k_hop_neighborhood,
    loads_grid,
    validate_grid,
)

LOAD_QUANTUM = 1.0 / 16.0  # kW; keeps load arithmetic exact in binary floating point
CABLE_RATINGS = (100.0, 130.0, 160.0, 200.0, 240.0, 280.0, 320.0, 360.0, 400.0, 460.0, 520.0)
MANIFEST_VERSION = 1


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    """Parameters of one grid family ("location")."""

    location: str = "loc"
    n_samples: int = 100
    node_count_range: tuple[int, int] = (30, 45)
    sources_range: tuple[int, int] = (1, 2)
    feeders_per_source: tuple[int, int] = (2, 3)
    # None pairs every feeder end with a tie; a range caps the number of ties
    tie_switch_count: Optional[tuple[int, int]] = None
    extra_ties: tuple[int, int] = (0, 0)
    lateral_prob: float = 0.03
    load_kw: tuple[float, float] = (60.0, 360.0)
    feeder_load_sigma: float = 0.3
    zero_load_fraction: float = 0.05
    impedance_ohm: tuple[float, float] = (0.03, 0.12)
    capacity_margin: tuple[float, float] = (1.8, 3.4)
    nominal_voltage: float = 10500.0
    balance: float = 0.5
    max_deviation: float = DEFAULT_MAX_DEVIATION
    max_attempts: int = 400
    seed: int = 0

    def __post_init__(self):
        for name in ("node_count_range", "sources_range", "feeders_per_source", "extra_ties", "load_kw",
                     "impedance_ohm", "capacity_margin"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range {lo}..{hi}")
            object.__setattr__(self, name, (lo, hi))
        if self.tie_switch_count is not None:
            lo, hi = self.tie_switch_count
            if lo > hi or lo < 0:
                raise ValueError("tie_switch_count: empty range")
            object.__setattr__(self, "tie_switch_count", (lo, hi))
        if not 0.0 < self.balance < 1.0:
            raise ValueError("balance must lie in (0, 1)")
        if self.sources_range[0] < 1 or self.feeders_per_source[0] < 1:
            raise ValueError("need at least one source and one feeder")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "GeneratorConfig":
        doc = dict(doc)
        for k, v in doc.items():
            if isinstance(v, list):
                doc[k] = tuple(v)
        return cls(**doc)


def default_locations(n_samples: int = 250, seed: int = 0) -> list[GeneratorConfig]:
    """Four grid families of increasing size, standing in for four real locations."""
    common = dict(n_samples=n_samples, seed=seed)
    return [
        GeneratorConfig(location="loc1", node_count_range=(45, 60), sources_range=(2, 2),
                        feeders_per_source=(2, 3), extra_ties=(0, 1), lateral_prob=0.06, **common),
        GeneratorConfig(location="loc2", node_count_range=(16, 24), sources_range=(1, 1),
                        feeders_per_source=(2, 2), **common),
        GeneratorConfig(location="loc3", node_count_range=(22, 34), sources_range=(1, 2),
                        feeders_per_source=(2, 2), **common),
        GeneratorConfig(location="loc4", node_count_range=(70, 90), sources_range=(3, 3),
                        feeders_per_source=(2, 3), **common),
    ]


def long_route_location(seed: int = 0) -> GeneratorConfig:
    """A family whose source-to-leaf routes average about 16 hops."""
    return GeneratorConfig(location="long", node_count_range=(95, 105), sources_range=(2, 2),
                           feeders_per_source=(3, 3), lateral_prob=0.0, seed=seed)


def _quantize(x: float) -> float:
    return math.floor(x / LOAD_QUANTUM) * LOAD_QUANTUM


def _rating(needed: float) -> float:
    for r in CABLE_RATINGS:
        if r >= needed:
            return r
    return math.ceil(needed / 20.0) * 20.0


def _sample_grid(config: GeneratorConfig, rng: np.random.Generator) -> Grid:
    n_src = int(rng.integers(config.sources_range[0], config.sources_range[1] + 1))
    per_src = [int(rng.integers(config.feeders_per_source[0], config.feeders_per_source[1] + 1))
               for _ in range(n_src)]
    n_feeders = sum(per_src)
    n_total = int(rng.integers(config.node_count_range[0], config.node_count_range[1] + 1))
    n_msr = max(n_total - n_src, 2 * n_feeders)
    # feeder sizes: Dirichlet split of the station budget, at least 2 per feeder
    share = rng.dirichlet(np.full(n_feeders, 6.0))
    sizes = 2 + np.floor(share * (n_msr - 2 * n_feeders)).astype(int)
    sizes[: n_msr - sizes.sum()] += 1

    kinds = [StationKind.PRIMARY] * n_src
    feeder_of = [-1] * n_src
    edges: list[tuple[int, int]] = []
    edge_feeder: list[int] = []
    leaves: list[tuple[int, int]] = []  # (node, feeder)
    feeder_nodes: list[list[int]] = []
    f = 0
    for s, count in enumerate(per_src):
        for _ in range(count):
            size = int(sizes[f])
            nodes_f: list[int] = []
            prev = s
            main = size
            n_lat = 0
            if size >= 5 and rng.random() < config.lateral_prob * size:
                n_lat = int(rng.integers(1, min(3, size - 3) + 1))
                main = size - n_lat
            for _ in range(main):
                v = len(kinds)
                kinds.append(StationKind.DISTRIBUTION)
                feeder_of.append(f)
                edges.append((prev, v))
                edge_feeder.append(f)
                nodes_f.append(v)
                prev = v
            leaves.append((prev, f))
            if n_lat:
                anchor = nodes_f[int(rng.integers(0, max(1, main - 2)))]
                prev = anchor
                for _ in range(n_lat):
                    v = len(kinds)
                    kinds.append(StationKind.DISTRIBUTION)
                    feeder_of.append(f)
                    edges.append((prev, v))
                    edge_feeder.append(f)
                    nodes_f.append(v)
                    prev = v
                leaves.append((prev, f))
            feeder_nodes.append(nodes_f)
            f += 1
    n = len(kinds)

    # tie cables between feeder ends, preferring feeders of another source
    src_of_feeder = [s for s, count in enumerate(per_src) for _ in range(count)]
    order = list(rng.permutation(len(leaves)))
    pending = [leaves[i] for i in order]
    ties: list[tuple[int, int]] = []
    existing = {tuple(sorted(e)) for e in edges}

    def add_tie(a: int, b: int) -> None:
        pair = tuple(sorted((a, b)))
        if pair not in existing:
            existing.add(pair)
            ties.append(pair)

    while pending:
        a, fa = pending.pop()
        partner = next((j for j in range(len(pending) - 1, -1, -1)
                        if src_of_feeder[pending[j][1]] != src_of_feeder[fa]), None)
        if partner is None:
            partner = next((j for j in range(len(pending) - 1, -1, -1) if pending[j][1] != fa), None)
        if partner is not None:
            add_tie(a, pending.pop(partner)[0])
            continue
        others = [v for g, nodes_g in enumerate(feeder_nodes) if g != fa for v in nodes_g]
        if others:
            add_tie(a, int(others[int(rng.integers(0, len(others)))]))

    # every source region must be reachable when all switches are closed
    region = list(range(n_src))

    def find(x: int) -> int:
        while region[x] != x:
            x = region[x]
        return x

    for a, b in ties:
        ra, rb = find(src_of_feeder[feeder_of[a]]), find(src_of_feeder[feeder_of[b]])
        if ra != rb:
            region[ra] = rb
    for s in range(1, n_src):
        if find(s) != find(0):
            here = [v for g, nodes_g in enumerate(feeder_nodes) if src_of_feeder[g] == s for v in nodes_g]
            there = [v for g, nodes_g in enumerate(feeder_nodes) if find(src_of_feeder[g]) == find(0)
                     for v in nodes_g]
            add_tie(int(here[-1]), int(there[int(rng.integers(0, len(there)))]))
            region[find(s)] = find(0)
    n_extra = int(rng.integers(config.extra_ties[0], config.extra_ties[1] + 1))
    for _ in range(n_extra * 10):
        if n_extra == 0:
            break
        a, b = (int(x) for x in rng.integers(n_src, n, size=2))
        if feeder_of[a] == feeder_of[b] or tuple(sorted((a, b))) in existing:
            continue
        add_tie(a, b)
        n_extra -= 1
    if config.tie_switch_count is not None:
        cap = int(rng.integers(config.tie_switch_count[0], config.tie_switch_count[1] + 1))
        ties = ties[:cap]

    # loads
    lo, hi = config.load_kw
    scale = np.exp(rng.normal(0.0, config.feeder_load_sigma, n_feeders))
    loads = np.zeros(n)
    for v in range(n_src, n):
        if rng.random() < config.zero_load_fraction:
            continue
        loads[v] = _quantize(rng.uniform(lo, hi) * scale[feeder_of[v]])

    # cable ratings follow each feeder's own head current
    head_current = np.zeros(n_feeders)
    for v in range(n_src, n):
        head_current[feeder_of[v]] += 1000.0 * loads[v] / config.nominal_voltage
    margin = rng.uniform(config.capacity_margin[0], config.capacity_margin[1], n_feeders)
    feeder_rating = [_rating(max(head_current[g], 1.0) * margin[g]) for g in range(n_feeders)]

    cables = []
    all_pairs = edges + ties
    zlo, zhi = config.impedance_ohm
    for i, (u, v) in enumerate(all_pairs):
        z = float(np.round(rng.uniform(zlo, zhi), 4))
        if i < len(edges):
            cap = feeder_rating[edge_feeder[i]]
        else:
            cap = max(feeder_rating[feeder_of[u]], feeder_rating[feeder_of[v]])
        cables.append(Cable(i, (u, v), z, cap))
    stations = tuple(
        Station(v, kinds[v], float(loads[v]), config.nominal_voltage) for v in range(n)
    )
    opened = frozenset(range(len(edges), len(all_pairs)))
    return Grid(stations, tuple(cables), opened)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in key]))


def generate_grid(
    config: GeneratorConfig,
    seed: int | Sequence[int],
    *,
    target_label: Optional[int] = None,
) -> LabeledSample:
    """One labelled sample; with ``target_label`` resample until the label matches."""
    key = (seed,) if isinstance(seed, (int, np.integer)) else tuple(seed)
    for attempt in range(config.max_attempts):
        rng = _rng(*key, attempt)
        grid = _sample_grid(config, rng)
        report = validate_grid(grid)
        if not report.ok:
            raise GenerationError(f"generator produced an invalid grid: {report.problems}")
        label = label_n1(grid, config.max_deviation, full_witness=False).label
        if target_label is None or label == target_label:
            return LabeledSample(grid, compute_features(grid), label, Provenance.GENERATED,
                                 location=config.location)
    raise GenerationError(
        f"no grid with label {target_label} after {config.max_attempts} attempts ({config.location})"
    )


# --- augmentation -------------------------------------------------------------


class Action(str, enum.Enum):
    ADD_NODES = "AddNodes"
    REMOVE_NODES = "RemoveNodes"


@dataclass(frozen=True)
class Candidate:
    kind: str  # "remove" | "split" | "attach"
    index: int  # node id for remove/attach, edge id for split


@dataclass(frozen=True)
class AugmentationRecord:
    source_id: str
    action: Action
    affected: tuple[int, ...]
    label_verified: bool

    def __post_init__(self):
        if not self.affected:
            raise ValueError("augmentation must touch at least one node")


class NoCandidatesError(ValueError):
    pass


def _radial_tree(grid: Grid):
    closed = [c.id for c in grid.edges if c.id not in grid.normally_open]
    owner, parent_edge, order, _ = _served_forest(grid, closed)
    parent = [-1] * grid.n_nodes
    children = [0] * grid.n_nodes
    for v in order:
        e = parent_edge[v]
        if e >= 0:
            parent[v] = grid.edges[e].other(v)
            children[parent[v]] += 1
    feeder = [-1] * grid.n_nodes
    for v in order:
        p = parent[v]
        if p >= 0:
            feeder[v] = v if grid.nodes[p].is_source else feeder[p]
    return parent, children, feeder


def _connected_without(grid: Grid, removed: set[int]) -> bool:
    alive = [v for v in range(grid.n_nodes) if v not in removed]
    if not alive:
        return False
    seen = {alive[0]}
    stack = [alive[0]]
    while stack:
        x = stack.pop()
        for y, _ in grid.incidence[x]:
            if y not in removed and y not in seen:
                seen.add(y)
                stack.append(y)
    return len(seen) == len(alive)


def select_candidates(sample: LabeledSample) -> list[Candidate]:
    """Sites where the topology may be changed without (by design) touching the label.

    Not-n-1 grids lose radial leaf stations whose feeder keeps at least one
    other station and whose removal keeps the closed graph connected. n-1 grids
    gain a station inside any cable, or a spare leaf on a zero-load station.
    """
    grid = sample.grid
    if sample.label == 0:
        _, children, feeder = _radial_tree(grid)
        size: dict[int, int] = {}
        for v in range(grid.n_nodes):
            if feeder[v] >= 0:
                size[feeder[v]] = size.get(feeder[v], 0) + 1
        out = [
            Candidate("remove", v)
            for v in range(grid.n_nodes)
            if not grid.nodes[v].is_source
            and children[v] == 0
            and size.get(feeder[v], 0) >= 2
            and _connected_without(grid, {v})
        ]
    else:
        out = [Candidate("split", c.id) for c in grid.edges]
        out += [
            Candidate("attach", s.id)
            for s in grid.nodes
            if not s.is_source and s.load == 0
        ]
    if not out:
        raise NoCandidatesError("no candidate sites for augmentation")
    return out


def _with_degrees(grid: Grid, node_features: np.ndarray) -> np.ndarray:
    node_features = node_features.copy()
    node_features[:, 3] = grid.degrees
    return node_features


def _remove_node(grid: Grid, nf: np.ndarray, ef: np.ndarray, r: int):
    keep_nodes = [v for v in range(grid.n_nodes) if v != r]
    new_id = {v: i for i, v in enumerate(keep_nodes)}
    keep_edges = [c for c in grid.edges if r not in c.endpoints]
    new_eid = {c.id: i for i, c in enumerate(keep_edges)}
    stations = tuple(dataclasses.replace(grid.nodes[v], id=new_id[v]) for v in keep_nodes)
    cables = tuple(
        Cable(new_eid[c.id], (new_id[c.endpoints[0]], new_id[c.endpoints[1]]), c.impedance, c.nominal_current)
        for c in keep_edges
    )
    opened = frozenset(new_eid[e] for e in grid.normally_open if e in new_eid)
    out = Grid(stations, cables, opened)
    return out, nf[keep_nodes], ef[[c.id for c in keep_edges]]


def _pool_means(grid: Grid, nf: np.ndarray, ef: np.ndarray, centre: int, new_nodes: set, new_edges: set):
    ball, ball_edges = k_hop_neighborhood(grid, centre, 2)
    pool_n = sorted(v for v in ball if v not in new_nodes)
    pool_e = sorted(e for e in ball_edges if e not in new_edges)
    node_mean = nf[pool_n].mean(axis=0) if pool_n else np.zeros(nf.shape[1])
    edge_mean = ef[pool_e].mean(axis=0) if pool_e else np.zeros(ef.shape[1])
    return node_mean, edge_mean


def _add_node(grid: Grid, nf: np.ndarray, ef: np.ndarray, cand: Candidate, rng: np.random.Generator):
    x = grid.n_nodes
    stations = list(grid.nodes)
    cables = list(grid.edges)
    opened = set(grid.normally_open)
    if cand.kind == "split":
        c = grid.edges[cand.index]
        u, v = c.endpoints
        options = [w for w in (u, v) if not grid.nodes[w].is_source] or [u]
        a = options[int(rng.integers(0, len(options)))]
        b = v if a == u else u
        moved = _quantize(rng.uniform() * grid.nodes[a].load)
        stations[a] = dataclasses.replace(grid.nodes[a], load=grid.nodes[a].load - moved)
        stations.append(Station(x, StationKind.DISTRIBUTION, moved, grid.nodes[a].nominal_voltage))
        m = len(cables)
        # the half towards the attachment keeps the id (and is closed); the far half inherits the switch state
        cables[c.id] = Cable(c.id, (a, x), c.impedance, c.nominal_current)
        cables.append(Cable(m, (x, b), c.impedance, c.nominal_current))
        if c.id in opened:
            opened.discard(c.id)
            opened.add(m)
        new_edges = {c.id, m}
        affected_edges = [c.id, m]
    else:
        w = cand.index
        stations.append(Station(x, StationKind.DISTRIBUTION, 0.0, grid.nodes[w].nominal_voltage))
        m = len(cables)
        nearby = [e for _, e in grid.incidence[w]]
        ref = grid.edges[nearby[0]] if nearby else None
        cables.append(Cable(m, (w, x), ref.impedance if ref else 1.0, ref.nominal_current if ref else 100.0))
        new_edges = {m}
        affected_edges = [m]
    out = Grid(tuple(stations), tuple(cables), frozenset(opened))
    nf2 = np.vstack([nf, np.zeros((1, nf.shape[1]))])
    ef2 = ef.copy()
    if len(cables) > ef.shape[0]:
        ef2 = np.vstack([ef2, np.zeros((len(cables) - ef.shape[0], ef.shape[1]))])
    node_mean, edge_mean = _pool_means(out, nf2, ef2, x, {x}, new_edges)
    nf2[x, :3] = node_mean[:3]
    for e in affected_edges:
        ef2[e] = edge_mean
    # cable attributes of the new elements follow their averaged features
    cables = list(out.edges)
    for e in affected_edges:
        cables[e] = Cable(e, cables[e].endpoints, float(ef2[e, 0]), float(ef2[e, 1]))
    out = Grid(out.nodes, tuple(cables), out.normally_open)
    return out, nf2, ef2, x


def augment(
    sample: LabeledSample,
    seed: int | Sequence[int],
    *,
    max_deviation: float = DEFAULT_MAX_DEVIATION,
) -> tuple[LabeledSample, AugmentationRecord]:
    """Change the topology once; the label is re-checked by the oracle afterwards."""
    key = (seed,) if isinstance(seed, (int, np.integer)) else tuple(seed)
    rng = _rng(*key)
    cands = select_candidates(sample)
    count = int(rng.integers(1, len(cands) + 1))
    grid = sample.grid
    nf = sample.features.node_features.copy()
    ef = sample.features.edge_features.copy()
    affected: list[int] = []
    if sample.label == 0:
        action = Action.REMOVE_NODES
        order = [cands[i] for i in rng.permutation(len(cands))]
        removed: list[int] = []
        for cand in order:
            if len(removed) == count:
                break
            trial = set(removed) | {cand.index}
            if _connected_without(sample.grid, trial):
                removed.append(cand.index)
        affected = sorted(removed)
        for r in sorted(removed, reverse=True):
            grid, nf, ef = _remove_node(grid, nf, ef, r)
    else:
        action = Action.ADD_NODES
        chosen = [cands[i] for i in sorted(rng.choice(len(cands), size=count, replace=False))]
        for cand in chosen:
            grid, nf, ef, x = _add_node(grid, nf, ef, cand, rng)
            affected.append(x)
    nf = _with_degrees(grid, nf)
    report = validate_grid(grid)
    if not report.ok:
        raise GenerationError(f"augmentation produced an invalid grid: {report.problems}")
    new_label = label_n1(grid, max_deviation, full_witness=False).label
    out = LabeledSample(
        grid,
        FeatureSet(nf, ef),
        sample.label,
        Provenance.AUGMENTED,
        sample_id=sample.sample_id + "a" if sample.sample_id else "",
        location=sample.location,
    )
    record = AugmentationRecord(sample.sample_id, action, tuple(affected), new_label == sample.label)
    return out, record


# --- datasets -----------------------------------------------------------------


@dataclass
class SampleEntry:
    id: str
    location: str
    label: int
    provenance: Provenance
    split: str  # train | val | test | excluded
    source_id: str = ""
    seed: tuple[int, ...] = ()
    n_nodes: int = 0
    n_edges: int = 0


@dataclass
class DatasetManifest:
    root: Optional[Path]
    seed: int
    configs: list[GeneratorConfig]
    entries: list[SampleEntry] = field(default_factory=list)
    test_fraction: float = 0.2
    val_fraction: float = 0.1

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "test_fraction": self.test_fraction,
            "val_fraction": self.val_fraction,
            "configs": [c.to_dict() for c in self.configs],
            "samples": [
                {**dataclasses.asdict(e), "provenance": e.provenance.value, "seed": list(e.seed)}
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict, root: Optional[Path] = None) -> "DatasetManifest":
        if doc.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {doc.get('version')!r}")
        entries = [
            SampleEntry(**{**s, "provenance": Provenance(s["provenance"]), "seed": tuple(s["seed"])})
            for s in doc["samples"]
        ]
        return cls(root, doc["seed"], [GeneratorConfig.from_dict(c) for c in doc["configs"]], entries,
                   doc["test_fraction"], doc["val_fraction"])

    @property
    def locations(self) -> list[str]:
        return [c.location for c in self.configs]

    def summary_rows(self) -> list[dict]:
        """Per location and provenance: node/edge counts (mean, std) and sample counts."""
        rows = []
        for loc in self.locations:
            for prov in Provenance:
                sel = [e for e in self.entries if e.location == loc and e.provenance is prov]
                if not sel:
                    continue
                nodes = np.array([e.n_nodes for e in sel], dtype=float)
                edges = np.array([e.n_edges for e in sel], dtype=float)
                rows.append({
                    "location": loc, "provenance": prov.value, "samples": len(sel),
                    "nodes_mean": float(nodes.mean()), "nodes_std": float(nodes.std()),
                    "edges_mean": float(edges.mean()), "edges_std": float(edges.std()),
                    "n1_fraction": float(np.mean([e.label for e in sel])),
                })
        return rows

    def summary_table(self) -> str:
        lines = [f"{'location':<10}{'provenance':<12}{'#nodes':>16}{'#edges':>16}{'#samples':>10}{'n-1':>7}"]
        for r in self.summary_rows():
            lines.append(
                f"{r['location']:<10}{r['provenance']:<12}"
                f"{r['nodes_mean']:>9.1f} ± {r['nodes_std']:<4.1f}"
                f"{r['edges_mean']:>9.1f} ± {r['edges_std']:<4.1f}"
                f"{r['samples']:>10d}{r['n1_fraction']:>7.2f}"
            )
        labels = [e.label for e in self.entries]
        if labels:
            lines.append(f"label histogram: n-1 {np.mean(labels):.2f} / not n-1 {1 - np.mean(labels):.2f}")
        return "\n".join(lines)


def _base_sample(config: GeneratorConfig, master_seed: int, loc_index: int, index: int, target: int):
    key = (master_seed, loc_index, index)
    for attempt in range(config.max_attempts):
        sample = generate_grid(config, key + (attempt,), target_label=target)
        try:
            select_candidates(sample)
        except NoCandidatesError:
            continue
        for aug_try in range(20):
            aug, record = augment(sample, key + (attempt, 1_000_000 + aug_try), max_deviation=config.max_deviation)
            if record.label_verified:
                return sample, aug, key + (attempt,)
    raise GenerationError(f"{config.location}[{index}]: could not produce a label-preserving augmentation")


def _build_one(args):
    config, master_seed, loc_index, index, target = args
    return _base_sample(config, master_seed, loc_index, index, target)


def build_dataset(
    configs: GeneratorConfig | Sequence[GeneratorConfig],
    out_dir: str | Path | None = None,
    *,
    seed: int = 0,
    test_fraction: float = 0.2,
    val_fraction: float = 0.1,
    workers: int = 1,
) -> tuple[DatasetManifest, list[LabeledSample]]:
    """Generate balanced base samples per location, augment each once, and split.

    The test split holds only generated samples. Augmented children of test
    samples are marked ``excluded`` so no test topology leaks into training.
    """
    if isinstance(configs, GeneratorConfig):
        configs = [configs]
    configs = list(configs)
    jobs = []
    for li, cfg in enumerate(configs):
        n_pos = int(round(cfg.balance * cfg.n_samples))
        for i in range(cfg.n_samples):
            jobs.append((cfg, seed, li, i, 1 if i < n_pos else 0))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_build_one, jobs, chunksize=4))
    else:
        results = [_build_one(j) for j in jobs]

    split_rng = _rng(seed, 0x5E1D)
    samples: list[LabeledSample] = []
    entries: list[SampleEntry] = []
    for li, cfg in enumerate(configs):
        idx = [k for k, j in enumerate(jobs) if j[2] == li]
        split_of: dict[int, str] = {}
        for lab in (1, 0):
            group = [k for k in idx if jobs[k][4] == lab]
            perm = [group[p] for p in split_rng.permutation(len(group))]
            n_test = int(round(test_fraction * len(group)))
            n_val = int(round(val_fraction * len(group)))
            for pos, k in enumerate(perm):
                split_of[k] = "test" if pos < n_test else ("val" if pos < n_test + n_val else "train")
        for k in idx:
            base, aug, key = results[k]
            i = jobs[k][3]
            sid = f"{cfg.location}-{i:05d}"
            base = dataclasses.replace(base, sample_id=sid, location=cfg.location)
            aug = dataclasses.replace(aug, sample_id=sid + "a", location=cfg.location)
            split = split_of[k]
            samples += [base, aug]
            entries.append(SampleEntry(sid, cfg.location, base.label, Provenance.GENERATED, split, "",
                                       key, base.grid.n_nodes, base.grid.n_edges))
            entries.append(SampleEntry(sid + "a", cfg.location, aug.label, Provenance.AUGMENTED,
                                       "excluded" if split == "test" else split, sid, key,
                                       aug.grid.n_nodes, aug.grid.n_edges))
    manifest = DatasetManifest(Path(out_dir) if out_dir else None, seed, configs, entries, test_fraction,
                               val_fraction)
    if out_dir is not None:
        write_dataset(manifest, samples, out_dir)
    return manifest, samples


def _features_json(fs: FeatureSet) -> str:
    return json.dumps(fs.to_dict(), sort_keys=True)


def write_dataset(manifest: DatasetManifest, samples: Sequence[LabeledSample], out_dir: str | Path) -> None:
    root = Path(out_dir)
    (root / "grids").mkdir(parents=True, exist_ok=True)
    (root / "features").mkdir(parents=True, exist_ok=True)
    for s in samples:
        (root / "grids" / f"{s.sample_id}.json").write_text(dumps_grid(s.grid) + "\n")
        (root / "features" / f"{s.sample_id}.json").write_text(_features_json(s.features) + "\n")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "label", "provenance"])
    for e in manifest.entries:
        writer.writerow([e.id, e.label, e.provenance.value])
    (root / "labels.csv").write_text(buf.getvalue())
    (root / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True) + "\n")
    manifest.root = root


def load_dataset(root: str | Path) -> tuple[DatasetManifest, dict[str, LabeledSample]]:
    root = Path(root)
    manifest = DatasetManifest.from_dict(json.loads((root / "manifest.json").read_text()), root)
    samples = {}
    for e in manifest.entries:
        grid = loads_grid((root / "grids" / f"{e.id}.json").read_text())
        feats = FeatureSet.from_dict(json.loads((root / "features" / f"{e.id}.json").read_text()))
        samples[e.id] = LabeledSample(grid, feats, e.label, e.provenance, e.id, e.location)
    return manifest, samples
