"""Graph Isomorphism Network with edge features for graph-level n-1 prediction.

Per layer ``k`` the edge embeddings are refreshed with ``(1 + eps1)`` scaling,
every node sums ``ReLU(h_u + g_uv)`` over its incident cables, and the node
update mixes that sum with ``(1 + eps2) * h_v``. The graph embedding
concatenates a pooled vector for every stored layer ``0..K``; a two-layer head
and a sigmoid turn it into the probability of the n-1 property.

Graphs are batched by stacking their nodes and cables; all neighbourhood
operations are products with constant sparse matrices, so batch norm sees
every node (or cable) row of the mini-batch at once.
"""

from __future__ import annotations

import copy
import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import nn
from .grid import EDGE_FEATURES, NODE_FEATURES, FeatureSet, LabeledSample
from .metrics import accuracy, auc
from .nn import Activation, Mlp, Mode, Param, Tape, Var

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "n1gin-checkpoint"
CHECKPOINT_VERSION = 1


class Pooling(str, enum.Enum):
    SUM = "Sum"
    MEAN = "Mean"
    MAX = "Max"


class DivergenceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class GinConfig:
    k: int = 15
    dim: int = 16
    pooling: Pooling = Pooling.SUM
    lr: float = 1e-4
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.dim < 1:
            raise ValueError("need k >= 1 and dim >= 1")
        if self.batch_size < 1 or self.epochs < 0 or not self.lr > 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and lr > 0 required")
        object.__setattr__(self, "pooling", Pooling(self.pooling))

    def to_dict(self) -> dict:
        return {"k": self.k, "dim": self.dim, "pooling": self.pooling.value, "lr": self.lr,
                "epochs": self.epochs, "batch_size": self.batch_size, "seed": self.seed}

    @classmethod
    def from_dict(cls, doc: dict) -> "GinConfig":
        return cls(**doc)


# --- inputs -------------------------------------------------------------------


@dataclass
class FeatureScaler:
    """Column standardisation fitted on training graphs."""

    node_mean: np.ndarray
    node_std: np.ndarray
    edge_mean: np.ndarray
    edge_std: np.ndarray

    @classmethod
    def identity(cls) -> "FeatureScaler":
        return cls(np.zeros(len(NODE_FEATURES)), np.ones(len(NODE_FEATURES)),
                   np.zeros(len(EDGE_FEATURES)), np.ones(len(EDGE_FEATURES)))

    @classmethod
    def fit(cls, samples: Sequence[LabeledSample]) -> "FeatureScaler":
        if not samples:
            raise ValueError("cannot fit a scaler on no samples")
        nf = np.vstack([s.features.node_features for s in samples])
        ef = np.vstack([s.features.edge_features for s in samples])

        def safe(std):
            return np.where(std > 0, std, 1.0)

        return cls(nf.mean(axis=0), safe(nf.std(axis=0)), ef.mean(axis=0), safe(ef.std(axis=0)))

    def transform(self, fs: FeatureSet) -> tuple[np.ndarray, np.ndarray]:
        return ((fs.node_features - self.node_mean) / self.node_std,
                (fs.edge_features - self.edge_mean) / self.edge_std)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("node_mean", "node_std", "edge_mean", "edge_std")}

    @classmethod
    def from_dict(cls, doc: dict) -> "FeatureScaler":
        return cls(*(np.array(doc[k], dtype=np.float64) for k in ("node_mean", "node_std", "edge_mean", "edge_std")))


@dataclass
class GraphBatch:
    """Several graphs stacked into one disconnected graph."""

    node_x: np.ndarray
    edge_x: np.ndarray
    adjacency: sp.csr_matrix  # N x N, one entry per incident cable
    gather_node: sp.csr_matrix  # 2E x N, source node of each directed message
    gather_edge: sp.csr_matrix  # 2E x E, cable carrying each message
    scatter: sp.csr_matrix  # N x 2E, target node of each message
    pool_sum: sp.csr_matrix  # G x N
    pool_mean: sp.csr_matrix  # G x N
    node_graph: np.ndarray
    n_graphs: int
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ids: tuple = ()

    @classmethod
    def from_arrays(cls, graphs: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]], labels=None, ids=()):
        """``graphs``: per graph (node features, edge features, E x 2 endpoints)."""
        node_x, edge_x, src, dst, eid, node_graph = [], [], [], [], [], []
        n_off = e_off = 0
        for gi, (nf, ef, ends) in enumerate(graphs):
            n, e = nf.shape[0], ef.shape[0]
            ends = np.asarray(ends, dtype=np.int64).reshape(-1, 2)
            if ends.shape[0] != e:
                raise ValueError("edge features and endpoints disagree")
            node_x.append(nf)
            edge_x.append(ef)
            u, v = ends[:, 0] + n_off, ends[:, 1] + n_off
            ids_e = np.arange(e) + e_off
            src += [u, v]
            dst += [v, u]
            eid += [ids_e, ids_e]
            node_graph.append(np.full(n, gi))
            n_off += n
            e_off += e
        src_a = np.concatenate(src) if src else np.zeros(0, dtype=np.int64)
        dst_a = np.concatenate(dst) if dst else np.zeros(0, dtype=np.int64)
        eid_a = np.concatenate(eid) if eid else np.zeros(0, dtype=np.int64)
        n_msg = src_a.size
        ones = np.ones(n_msg)
        rows = np.arange(n_msg)
        gather_node = sp.csr_matrix((ones, (rows, src_a)), shape=(n_msg, n_off))
        gather_edge = sp.csr_matrix((ones, (rows, eid_a)), shape=(n_msg, e_off))
        scatter = sp.csr_matrix((ones, (dst_a, rows)), shape=(n_off, n_msg))
        adjacency = (scatter @ gather_node).tocsr()
        ng = np.concatenate(node_graph) if node_graph else np.zeros(0, dtype=np.int64)
        g = len(graphs)
        pool_sum = sp.csr_matrix((np.ones(n_off), (ng, np.arange(n_off))), shape=(g, n_off))
        counts = np.bincount(ng, minlength=g).astype(float)
        pool_mean = sp.csr_matrix((1.0 / counts[ng], (ng, np.arange(n_off))), shape=(g, n_off))
        return cls(np.vstack(node_x), np.vstack(edge_x), adjacency, gather_node, gather_edge, scatter,
                   pool_sum, pool_mean, ng, g, np.zeros(g) if labels is None else np.asarray(labels, float),
                   tuple(ids))

    @classmethod
    def from_samples(cls, samples: Sequence[LabeledSample], scaler: Optional[FeatureScaler] = None):
        scaler = scaler or FeatureScaler.identity()
        graphs = []
        for s in samples:
            nf, ef = scaler.transform(s.features)
            graphs.append((nf, ef, s.grid.endpoints))
        return cls.from_arrays(graphs, [s.label for s in samples], [s.sample_id for s in samples])


# --- model --------------------------------------------------------------------


@dataclass
class EmbeddingState:
    h: list = field(default_factory=list)  # per layer, N x dim
    g: list = field(default_factory=list)  # per layer, E x dim


class GinModel(nn.Module):
    def __init__(self, config: GinConfig, n_node_features: int = len(NODE_FEATURES),
                 n_edge_features: int = len(EDGE_FEATURES)):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x61E]))
        d = config.dim
        self.mlp1 = Mlp([n_node_features, d, d], rng)
        self.mlp2 = Mlp([n_edge_features, d, d], rng)
        self.mlp3 = [Mlp([d, d, d], rng) for _ in range(config.k)]
        self.mlp4 = [Mlp([d, d, d], rng) for _ in range(config.k)]
        self.eps1 = [Param(0.0, "eps1") for _ in range(config.k)]
        self.eps2 = [Param(0.0, "eps2") for _ in range(config.k)]
        self.head = Mlp([(config.k + 1) * d, d, 1], rng, activations=[Activation.RELU, Activation.IDENTITY],
                        batch_norm=[True, False])
        self.scaler: Optional[FeatureScaler] = None

    def forward(self, batch: GraphBatch, tape: Optional[Tape] = None) -> Var:
        state = embed_inputs(self, batch, tape)
        for k in range(1, self.config.k + 1):
            a = aggregate(batch, state, k, tape)
            edge_update(self, k, state, tape)
            combine(self, k, state, a, tape)
        pooled = readout(state, batch, self.config.pooling, tape)
        return nn.sigmoid(self.head(pooled, tape), tape)

    def predict(self, samples: Sequence[LabeledSample], batch_size: int = 256) -> np.ndarray:
        """Eval-mode probabilities, one per sample."""
        self.set_mode(Mode.EVAL)
        out = []
        for i in range(0, len(samples), batch_size):
            batch = GraphBatch.from_samples(samples[i:i + batch_size], self.scaler)
            out.append(self.forward(batch).value.reshape(-1))
        return np.concatenate(out) if out else np.zeros(0)


def embed_inputs(model: GinModel, batch: GraphBatch, tape: Optional[Tape] = None) -> EmbeddingState:
    """Layer 0: nodes sum the embedded features of their neighbours; cables embed their own."""
    m = model.mlp1(Var(batch.node_x), tape)
    h0 = nn.spmm(batch.adjacency, m, tape)
    g0 = model.mlp2(Var(batch.edge_x), tape)
    return EmbeddingState([h0], [g0])


def edge_update(model: GinModel, k: int, state: EmbeddingState, tape: Optional[Tape] = None) -> Var:
    g = model.mlp3[k - 1](nn.scale_one_plus(state.g[k - 1], model.eps1[k - 1], tape), tape)
    state.g.append(g)
    return g


def aggregate(batch: GraphBatch, state: EmbeddingState, k: int, tape: Optional[Tape] = None) -> Var:
    """Sum over incident cables of ReLU(h_u + g_uv), from layer ``k - 1`` embeddings."""
    h_src = nn.spmm(batch.gather_node, state.h[k - 1], tape)
    g_msg = nn.spmm(batch.gather_edge, state.g[k - 1], tape)
    msg = nn.relu(nn.add(h_src, g_msg, tape), tape)
    return nn.spmm(batch.scatter, msg, tape)


def combine(model: GinModel, k: int, state: EmbeddingState, a: Var, tape: Optional[Tape] = None) -> Var:
    mixed = nn.add(nn.scale_one_plus(state.h[k - 1], model.eps2[k - 1], tape), a, tape)
    h = model.mlp4[k - 1](mixed, tape)
    state.h.append(h)
    return h


def readout(state: EmbeddingState, batch: GraphBatch, pooling: Pooling, tape: Optional[Tape] = None) -> Var:
    pooling = Pooling(pooling)
    pooled = []
    for h in state.h:
        if pooling is Pooling.SUM:
            pooled.append(nn.spmm(batch.pool_sum, h, tape))
        elif pooling is Pooling.MEAN:
            pooled.append(nn.spmm(batch.pool_mean, h, tape))
        else:
            pooled.append(nn.segment_max(h, batch.node_graph, batch.n_graphs, tape))
    return nn.concat(pooled, tape)


def forward(model: GinModel, sample: LabeledSample) -> float:
    """Eval-mode probability for a single sample."""
    return float(model.predict([sample])[0])


# --- training -----------------------------------------------------------------


@dataclass
class HistoryRow:
    epoch: int
    split: str
    loss: float
    accuracy: float
    auc: float


@dataclass
class TrainResult:
    model: GinModel
    history: list[HistoryRow]
    best_epoch: int
    best_val_auc: float
    adam: nn.AdamState
    rng_state: dict

    def history_csv(self) -> str:
        lines = ["epoch,split,loss,accuracy,auc"]
        for r in self.history:
            lines.append(f"{r.epoch},{r.split},{r.loss!r},{r.accuracy!r},{r.auc!r}")
        return "\n".join(lines) + "\n"


def _bce_value(p: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(p, nn.BCE_CLAMP, 1.0 - nn.BCE_CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def _safe_auc(p, y) -> float:
    try:
        return auc(p, y)
    except ValueError:
        return float("nan")


def evaluate(model: GinModel, samples: Sequence[LabeledSample]) -> tuple[float, float, float]:
    """(loss, accuracy, auc) in eval mode; auc is nan for single-class sets."""
    p = model.predict(samples)
    y = np.array([s.label for s in samples], dtype=float)
    return _bce_value(p, y), accuracy(p, y), _safe_auc(p, y)


def train(
    model: GinModel,
    train_set: Sequence[LabeledSample],
    val_set: Sequence[LabeledSample] = (),
    config: Optional[GinConfig] = None,
    *,
    batch_log=None,
) -> TrainResult:
    """Mini-batch Adam on binary cross-entropy; keeps the best validation-AUC state.

    Without a validation set the last epoch is kept. ``batch_log``, if given,
    is called with the sample ids of every training batch.
    """
    config = config or model.config
    if not train_set:
        raise ValueError("empty training set")
    train_ids = {s.sample_id for s in train_set if s.sample_id}
    if any(s.sample_id in train_ids for s in val_set if s.sample_id):
        raise ValueError("training and validation sets overlap")
    if model.scaler is None:
        model.scaler = FeatureScaler.fit(train_set)
    params = model.parameters()
    adam = nn.AdamState(lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7EA1]))
    history: list[HistoryRow] = []
    best = (-math.inf, -1, nn.state_dict(model))
    for epoch in range(1, config.epochs + 1):
        model.set_mode(Mode.TRAIN)
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), config.batch_size):
            chunk = [train_set[i] for i in order[start:start + config.batch_size]]
            if batch_log is not None:
                batch_log([s.sample_id for s in chunk])
            batch = GraphBatch.from_samples(chunk, model.scaler)
            tape = Tape()
            pred = model.forward(batch, tape)
            loss = nn.bce_loss(pred, batch.labels.reshape(-1, 1), tape)
            value = float(loss.value)
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at epoch {epoch}, batch starting {start}")
            nn.backward(tape, loss, params)
            nn.adam_step(params, [p.grad for p in params], adam)
            losses.append(value * len(chunk))
        _, tr_acc, tr_auc = evaluate(model, train_set)
        history.append(HistoryRow(epoch, "train", float(np.sum(losses) / len(train_set)), tr_acc, tr_auc))
        score = tr_auc
        if val_set:
            v_loss, v_acc, v_auc = evaluate(model, val_set)
            history.append(HistoryRow(epoch, "val", v_loss, v_acc, v_auc))
            score = v_auc
        if not val_set:
            best = (score, epoch, None)
        elif math.isfinite(score) and score > best[0]:
            best = (score, epoch, nn.state_dict(model))
        log.debug("epoch %d: %s", epoch, history[-1])
    if val_set and best[2] is not None and best[1] > 0:
        nn.load_state_dict(model, best[2])
    model.set_mode(Mode.EVAL)
    return TrainResult(model, history, best[1], best[0], adam, rng.bit_generator.state)


# --- checkpoints --------------------------------------------------------------


def checkpoint_dict(model: GinModel, *, adam: Optional[nn.AdamState] = None,
                    rng_state: Optional[dict] = None) -> dict:
    state = nn.state_dict(model)
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "scaler": None if model.scaler is None else model.scaler.to_dict(),
        "tensors": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in state.items()},
        "adam": None if adam is None else adam.to_dict(),
        "rng": rng_state,
    }


def save_checkpoint(model: GinModel, path, *, adam: Optional[nn.AdamState] = None,
                    rng_state: Optional[dict] = None) -> None:
    text = json.dumps(checkpoint_dict(model, adam=adam, rng_state=rng_state), sort_keys=True)
    Path(path).write_text(text + "\n")


def load_checkpoint(path, config: Optional[GinConfig] = None) -> GinModel:
    """Rebuild a model; with ``config`` the stored architecture must match it."""
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {doc.get('version')!r}, expected {CHECKPOINT_VERSION}")
    try:
        stored = GinConfig.from_dict(doc["config"])
        tensors = {k: np.array(t["data"], dtype=np.float64).reshape(t["shape"]) for k, t in doc["tensors"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if config is not None and (config.k, config.dim) != (stored.k, stored.dim):
        raise CheckpointError(
            f"checkpoint holds k={stored.k}, dim={stored.dim}; requested k={config.k}, dim={config.dim}"
        )
    model = GinModel(stored if config is None else config)
    try:
        nn.load_state_dict(model, tensors)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    if doc.get("scaler") is not None:
        model.scaler = FeatureScaler.from_dict(doc["scaler"])
    model.set_mode(Mode.EVAL)
    return model


def clone(model: GinModel) -> GinModel:
    return copy.deepcopy(model)
