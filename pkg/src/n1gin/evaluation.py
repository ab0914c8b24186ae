"""Evaluation harness: metrics, permutation importance, experiment plans, baseline timing.

Three plan kinds mirror the usual protocol for grids from several operators:
train and test inside one location, on all locations pooled, or leave one
location out for testing. Test sets only ever hold generated samples.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .flow import DEFAULT_MAX_DEVIATION, compute_features, label_n1
from .gin import GinConfig, GinModel, GraphBatch, HistoryRow, Pooling, train
from .grid import EDGE_FEATURES, NODE_FEATURES, LabeledSample, Provenance
from .metrics import accuracy, auc
from .nn import Mode
from .synth import DatasetManifest

__all__ = [
    "accuracy", "auc", "PfiReport", "permutation_feature_importance", "pfi_report", "PlanKind",
    "ExperimentPlan", "Round", "plan_rounds", "run_experiment", "ExperimentReport", "compare_baseline",
    "BaselineReport",
]

FEATURE_KINDS = ("node", "edge")


# --- permutation feature importance ---------------------------------------------


def _check_feature(kind: str, column: int) -> str:
    names = NODE_FEATURES if kind == "node" else EDGE_FEATURES if kind == "edge" else None
    if names is None:
        raise ValueError(f"feature kind must be 'node' or 'edge', got {kind!r}")
    if not 0 <= column < len(names):
        raise ValueError(f"invalid {kind} feature column {column}")
    return names[column]


def _batch_scores(model: GinModel, batch: GraphBatch) -> np.ndarray:
    model.set_mode(Mode.EVAL)
    return model.forward(batch).value.reshape(-1)


def _shuffled_auc(model, batch, labels, kind, column, rng) -> float:
    attr = "node_x" if kind == "node" else "edge_x"
    original = getattr(batch, attr)
    shuffled = original.copy()
    shuffled[:, column] = original[rng.permutation(original.shape[0]), column]
    setattr(batch, attr, shuffled)
    try:
        return auc(_batch_scores(model, batch), labels)
    finally:
        setattr(batch, attr, original)


def permutation_feature_importance(
    model: GinModel,
    test_set: Sequence[LabeledSample],
    feature: tuple[str, int],
    repeats: int = 10,
    seed: int = 0,
) -> float:
    """Baseline AUC minus mean AUC after shuffling one column over the pooled test set."""
    kind, column = feature
    _check_feature(kind, column)
    batch = GraphBatch.from_samples(list(test_set), model.scaler)
    labels = batch.labels
    base = auc(_batch_scores(model, batch), labels)
    rng = np.random.default_rng(np.random.SeedSequence([seed, FEATURE_KINDS.index(kind), column]))
    # average the differences so an unused column gives exactly 0.0
    drops = [base - _shuffled_auc(model, batch, labels, kind, column, rng) for _ in range(repeats)]
    return float(np.mean(drops))


def normalise(raw: Sequence[float]) -> list[float]:
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if not hi > lo:
        return [0.0] * raw.size
    return [float(x) for x in (raw - lo) / (hi - lo)]


@dataclass
class PfiReport:
    features: list[tuple[str, int, str]]
    importance: list[float]
    repeats: int
    seed: int

    @property
    def normalized(self) -> list[float]:
        return normalise(self.importance)

    def rows(self) -> list[dict]:
        return [
            {"kind": k, "column": c, "feature": n, "importance": imp, "normalized": nrm}
            for (k, c, n), imp, nrm in zip(self.features, self.importance, self.normalized)
        ]

    def to_csv(self) -> str:
        return _csv(self.rows(), ["kind", "column", "feature", "importance", "normalized"])

    def to_dict(self) -> dict:
        return {"repeats": self.repeats, "seed": self.seed, "features": self.rows()}


def all_features() -> list[tuple[str, int]]:
    return [("node", c) for c in range(len(NODE_FEATURES))] + [("edge", c) for c in range(len(EDGE_FEATURES))]


def pfi_report(
    model: GinModel,
    test_set: Sequence[LabeledSample],
    features: Optional[Sequence[tuple[str, int]]] = None,
    repeats: int = 10,
    seed: int = 0,
) -> PfiReport:
    features = list(features or all_features())
    named = [(k, c, _check_feature(k, c)) for k, c in features]
    imp = [permutation_feature_importance(model, test_set, (k, c), repeats, seed) for k, c in features]
    return PfiReport(named, imp, repeats, seed)


def average_pfi(reports: Sequence[PfiReport]) -> PfiReport:
    """Mean raw importance over several reports with identical feature lists."""
    if not reports:
        raise ValueError("no reports to average")
    feats = reports[0].features
    if any(r.features != feats for r in reports):
        raise ValueError("reports cover different features")
    imp = np.mean([r.importance for r in reports], axis=0)
    return PfiReport(feats, [float(x) for x in imp], reports[0].repeats, reports[0].seed)


# --- experiment plans ---------------------------------------------------------


class PlanKind(str, enum.Enum):
    SINGLE = "SingleLocation"
    ALL = "AllLocations"
    LOO = "LeaveOneOut"


@dataclass(frozen=True)
class ExperimentPlan:
    kind: PlanKind = PlanKind.LOO
    augmentation: bool = True
    ks: tuple[int, ...] = (5, 10, 15, 20)
    poolings: tuple[Pooling, ...] = (Pooling.SUM,)
    seeds: tuple[int, ...] = (0,)
    epochs: int = 100
    lr: float = 1e-4
    batch_size: int = 32
    locations: Optional[tuple[str, ...]] = None  # None: every location in the manifest
    pfi_repeats: int = 0  # 0 disables importance

    def __post_init__(self):
        object.__setattr__(self, "kind", PlanKind(self.kind))
        object.__setattr__(self, "poolings", tuple(Pooling(p) for p in self.poolings))
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.locations is not None:
            object.__setattr__(self, "locations", tuple(self.locations))
        if not self.ks or not self.poolings or not self.seeds:
            raise ValueError("plan needs at least one k, pooling and seed")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value, "augmentation": self.augmentation, "ks": list(self.ks),
            "poolings": [p.value for p in self.poolings], "seeds": list(self.seeds), "epochs": self.epochs,
            "lr": self.lr, "batch_size": self.batch_size,
            "locations": None if self.locations is None else list(self.locations),
            "pfi_repeats": self.pfi_repeats,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentPlan":
        doc = dict(doc)
        for key in ("ks", "poolings", "seeds"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)

    def gin_config(self, k: int, pooling: Pooling, seed: int) -> GinConfig:
        return GinConfig(k=k, pooling=pooling, lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
                         seed=seed)


@dataclass(frozen=True)
class Round:
    name: str
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


def plan_rounds(plan: ExperimentPlan, manifest: DatasetManifest) -> list[Round]:
    """Train/validation/test id lists for every round of the plan.

    Validation and test sets hold generated samples only. In leave-one-out
    rounds every sample of the held-out location is a test sample, and the
    other locations contribute all their non-validation samples to training.
    """
    locations = list(plan.locations or manifest.locations)
    unknown = set(locations) - set(manifest.locations)
    if unknown:
        raise ValueError(f"plan names locations missing from the dataset: {sorted(unknown)}")
    if plan.kind is PlanKind.LOO and len(locations) < 2:
        raise ValueError("leave-one-out needs at least two locations")
    entries = manifest.entries

    def use_for_training(e) -> bool:
        return plan.augmentation or e.provenance is Provenance.GENERATED

    def pick(pred) -> tuple[str, ...]:
        return tuple(e.id for e in entries if pred(e))

    gen = Provenance.GENERATED
    rounds = []
    if plan.kind is PlanKind.LOO:
        for held in locations:
            train_locs = set(locations) - {held}
            rounds.append(Round(
                held,
                pick(lambda e: e.location in train_locs and e.split != "val" and use_for_training(e)),
                pick(lambda e: e.location in train_locs and e.split == "val" and e.provenance is gen),
                pick(lambda e: e.location == held and e.provenance is gen),
            ))
        return rounds
    groups = [[loc] for loc in locations] if plan.kind is PlanKind.SINGLE else [locations]
    for group in groups:
        locs = set(group)
        rounds.append(Round(
            group[0] if len(group) == 1 else "all",
            pick(lambda e: e.location in locs and e.split == "train" and use_for_training(e)),
            pick(lambda e: e.location in locs and e.split == "val" and e.provenance is gen),
            pick(lambda e: e.location in locs and e.split == "test" and e.provenance is gen),
        ))
    return rounds


@dataclass
class CellResult:
    round: str
    k: int
    pooling: str
    seed: int
    augmentation: bool
    test_auc: float
    test_accuracy: float
    best_epoch: int
    n_train: int
    n_test: int


@dataclass
class ExperimentReport:
    plan: ExperimentPlan
    cells: list[CellResult] = field(default_factory=list)
    curves: dict = field(default_factory=dict)  # (round, k, pooling, seed) -> history rows
    pfi: dict = field(default_factory=dict)  # round -> PfiReport

    def table(self, metric: str = "auc") -> list[dict]:
        """Seed-averaged metric with one row per (k, pooling) and one column per round."""
        attr = "test_auc" if metric == "auc" else "test_accuracy"
        rounds = list(dict.fromkeys(c.round for c in self.cells))
        rows = []
        for k in self.plan.ks:
            for pool in self.plan.poolings:
                row = {"model": f"GIN-{k}", "pooling": pool.value, "augmentation": self.plan.augmentation}
                for r in rounds:
                    vals = [getattr(c, attr) for c in self.cells
                            if c.round == r and c.k == k and c.pooling == pool.value]
                    row[r] = float(np.mean(vals)) if vals else float("nan")
                rows.append(row)
        return rows

    def mean(self, k: int, metric: str = "auc", pooling: Optional[Pooling] = None) -> float:
        attr = "test_auc" if metric == "auc" else "test_accuracy"
        vals = [getattr(c, attr) for c in self.cells
                if c.k == k and (pooling is None or c.pooling == Pooling(pooling).value)]
        return float(np.mean(vals))

    def table_csv(self, metric: str = "auc") -> str:
        rows = self.table(metric)
        return _csv(rows, list(rows[0].keys()) if rows else [])

    def cells_csv(self) -> str:
        return _csv([vars(c) for c in self.cells], list(CellResult.__dataclass_fields__))

    def curves_csv(self) -> str:
        rows = []
        for (rnd, k, pool, seed), hist in self.curves.items():
            for h in hist:
                rows.append({"round": rnd, "k": k, "pooling": pool, "seed": seed, **vars(h)})
        return _csv(rows, ["round", "k", "pooling", "seed", "epoch", "split", "loss", "accuracy", "auc"])

    def to_dict(self) -> dict:
        return {
            "plan": self.plan.to_dict(),
            "cells": [vars(c) for c in self.cells],
            "auc_table": self.table("auc"),
            "accuracy_table": self.table("accuracy"),
            "pfi": {r: rep.to_dict() for r, rep in self.pfi.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=True)

    def write(self, out_dir) -> None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json() + "\n")
        (out / "auc_table.csv").write_text(self.table_csv("auc"))
        (out / "accuracy_table.csv").write_text(self.table_csv("accuracy"))
        (out / "cells.csv").write_text(self.cells_csv())
        (out / "curves.csv").write_text(self.curves_csv())
        if self.pfi:
            rows = [{"round": r, **row} for r, rep in self.pfi.items() for row in rep.rows()]
            (out / "pfi.csv").write_text(
                _csv(rows, ["round", "kind", "column", "feature", "importance", "normalized"]))


def run_experiment(
    plan: ExperimentPlan,
    manifest: DatasetManifest,
    samples: dict[str, LabeledSample] | Sequence[LabeledSample],
    *,
    batch_log: Optional[Callable[[str, list[str]], None]] = None,
    progress: Optional[Callable[[str], None]] = None,
) -> ExperimentReport:
    """Train and test every (round, k, pooling, seed) cell of the plan in a fixed order.

    ``batch_log(round, ids)`` receives the sample ids of every training batch.
    """
    if not isinstance(samples, dict):
        samples = {s.sample_id: s for s in samples}
    missing = [e.id for e in manifest.entries if e.id not in samples]
    if missing:
        raise ValueError(f"dataset lacks samples listed in the manifest, e.g. {missing[:3]}")
    report = ExperimentReport(plan)
    for rnd in plan_rounds(plan, manifest):
        train_set = [samples[i] for i in rnd.train_ids]
        val_set = [samples[i] for i in rnd.val_ids]
        test_set = [samples[i] for i in rnd.test_ids]
        if not train_set or not test_set:
            raise ValueError(f"round {rnd.name}: empty training or test set")
        y = np.array([s.label for s in test_set])
        pfi_runs = []
        for k in plan.ks:
            for pool in plan.poolings:
                for seed in plan.seeds:
                    cfg = plan.gin_config(k, pool, seed)
                    log_fn = None if batch_log is None else (lambda ids, r=rnd.name: batch_log(r, ids))
                    result = train(GinModel(cfg), train_set, val_set, cfg, batch_log=log_fn)
                    p = result.model.predict(test_set)
                    cell = CellResult(rnd.name, k, pool.value, seed, plan.augmentation, auc(p, y),
                                      accuracy(p, y), result.best_epoch, len(train_set), len(test_set))
                    report.cells.append(cell)
                    report.curves[(rnd.name, k, pool.value, seed)] = result.history
                    if plan.pfi_repeats and k == plan.ks[0] and pool == plan.poolings[0]:
                        pfi_runs.append(pfi_report(result.model, test_set, repeats=plan.pfi_repeats, seed=seed))
                    if progress is not None:
                        progress(f"{rnd.name} k={k} {pool.value} seed={seed}: auc={cell.test_auc:.3f} "
                                 f"acc={cell.test_accuracy:.3f}")
        if pfi_runs:
            report.pfi[rnd.name] = average_pfi(pfi_runs)
    return report


# --- comparison with the exact search -----------------------------------------


@dataclass
class BaselineReport:
    n_samples: int
    oracle_seconds: float  # mean per sample
    gin_seconds: float  # mean per sample, feature computation plus batched inference
    gin_model_seconds: float  # mean per sample, batched inference only
    oracle_accuracy: float
    gin_accuracy: float
    gin_auc: float

    @property
    def speedup(self) -> float:
        return self.oracle_seconds / self.gin_seconds

    def rows(self) -> list[dict]:
        return [
            {"method": "exact search", "seconds_per_sample": self.oracle_seconds, "accuracy": self.oracle_accuracy},
            {"method": "GIN", "seconds_per_sample": self.gin_seconds, "accuracy": self.gin_accuracy},
        ]

    def to_dict(self) -> dict:
        return {**vars(self), "speedup": self.speedup}

    def table(self) -> str:
        lines = [f"{'method':<14}{'s/sample':>12}{'accuracy':>10}"]
        for r in self.rows():
            lines.append(f"{r['method']:<14}{r['seconds_per_sample']:>12.5f}{r['accuracy']:>10.3f}")
        lines.append(f"speedup {self.speedup:.1f}x over {self.n_samples} samples (GIN auc {self.gin_auc:.3f})")
        return "\n".join(lines)


def compare_baseline(
    test_set: Sequence[LabeledSample],
    model: GinModel,
    *,
    max_deviation: float = DEFAULT_MAX_DEVIATION,
    min_nodes: int = 0,
) -> BaselineReport:
    """Wall-clock of the exact labelling against the GIN on the same grids.

    The GIN time includes computing the input features from the grid; the
    labelling time covers every contingency (full witness).
    """
    chosen = [s for s in test_set if s.grid.n_nodes >= min_nodes]
    if not chosen:
        raise ValueError(f"no test grids with at least {min_nodes} nodes")
    labels = np.array([s.label for s in chosen])
    t0 = time.perf_counter()
    oracle = [label_n1(s.grid, max_deviation).label for s in chosen]
    t_oracle = time.perf_counter() - t0
    t0 = time.perf_counter()
    fresh = [LabeledSample(s.grid, compute_features(s.grid), s.label, s.provenance, s.sample_id, s.location)
             for s in chosen]
    t_feat = time.perf_counter() - t0
    t0 = time.perf_counter()
    scores = model.predict(fresh)
    t_model = time.perf_counter() - t0
    n = len(chosen)
    try:
        gin_auc = auc(scores, labels)
    except ValueError:
        gin_auc = float("nan")
    return BaselineReport(n, t_oracle / n, (t_feat + t_model) / n, t_model / n,
                          accuracy(np.array(oracle), labels), accuracy(scores, labels), gin_auc)


def _csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
