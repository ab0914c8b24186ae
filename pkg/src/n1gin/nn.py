"""A small dense neural-network core with reverse-mode gradients.

Values are float64 numpy arrays wrapped in :class:`Var`. Every op takes an
optional :class:`Tape`; when one is given the op appends a node holding its
inputs and a backward closure, and :func:`backward` walks the tape in reverse
creation order. Passing ``tape=None`` evaluates without recording.

Only the ops the GIN needs are provided: affine layers, 1-D batch norm,
ReLU, scaling by a learnable ``(1 + eps)``, products with constant sparse
matrices (gather, scatter and pooling), segment max, concatenation, sigmoid
and binary cross-entropy.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

BCE_CLAMP = 1e-7
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class TapeError(RuntimeError):
    pass


class Var:
    """A value in the computation graph."""

    __slots__ = ("value", "grad", "_index", "name")

    def __init__(self, value, name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self._index = -1
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var({self.name or '?'}, shape={self.value.shape})"


class Param(Var):
    """A trainable leaf. Its gradient is zero until a backward pass reaches it."""

    __slots__ = ()

    def __init__(self, value, name: str = ""):
        super().__init__(np.array(value, dtype=np.float64), name)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


@dataclass
class _Node:
    out: Var
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    branch: Optional[np.ndarray] = None  # which side of a kink each entry took


class Tape:
    """Records ops in creation order; :func:`backward` replays them in reverse."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._done = False

    def record(self, out: Var, inputs: tuple, fn, branch: Optional[np.ndarray] = None) -> Var:
        if self._done:
            raise TapeError("tape already consumed by backward")
        out._index = len(self.nodes)
        self.nodes.append(_Node(out, inputs, fn, branch))
        return out

    def branches(self) -> list[np.ndarray]:
        """Branch patterns of the non-smooth ops, in recording order."""
        return [n.branch for n in self.nodes if n.branch is not None]

    def __len__(self):
        return len(self.nodes)


def _emit(tape: Optional[Tape], value, inputs: tuple, fn, branch: Optional[np.ndarray] = None) -> Var:
    out = Var(value)
    if tape is not None:
        tape.record(out, inputs, fn, branch)
    return out


def backward(tape: Tape, loss: Var, params: Iterable[Param] = ()) -> None:
    """Accumulate d(loss)/d(x) into ``.grad`` of every recorded input.

    ``params`` are zeroed first, so parameters the loss does not reach end
    with a zero gradient.
    """
    if loss.value.size != 1:
        raise ValueError("loss must be a scalar")
    if loss._index < 0 or loss._index >= len(tape.nodes) or tape.nodes[loss._index].out is not loss:
        raise TapeError("loss was not recorded on this tape")
    for p in params:
        p.zero_grad()
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for pos in range(loss._index, -1, -1):
        node = tape.nodes[pos]
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for x, gx in zip(node.inputs, node.backward(g)):
            if gx is None or not isinstance(x, Var):
                continue
            if isinstance(x, Param):
                x.grad = x.grad + gx
                continue
            if x._index >= pos:
                raise TapeError("cycle in tape: input recorded after its consumer")
            prev = grads.get(id(x))
            grads[id(x)] = gx if prev is None else prev + gx
    tape._done = True


# --- primitive ops ------------------------------------------------------------


def linear(x: Var, weight: Var, bias: Optional[Var] = None, tape: Optional[Tape] = None) -> Var:
    if x.value.ndim != 2 or x.value.shape[1] != weight.value.shape[1]:
        raise ValueError(f"linear: input {x.value.shape} does not match weight {weight.value.shape}")
    xv, wv = x.value, weight.value
    if bias is None:
        return _emit(tape, xv @ wv.T, (x, weight), lambda g: (g @ wv, g.T @ xv))

    def fn(g):
        return g @ wv, g.T @ xv, g.sum(axis=0)

    return _emit(tape, xv @ wv.T + bias.value, (x, weight, bias), fn)


def relu(x: Var, tape: Optional[Tape] = None) -> Var:
    mask = x.value > 0

    def fn(g):
        return (g * mask,)

    return _emit(tape, np.where(mask, x.value, 0.0), (x,), fn, mask)


def add(a: Var, b: Var, tape: Optional[Tape] = None) -> Var:
    if a.value.shape != b.value.shape:
        raise ValueError(f"add: shapes {a.value.shape} and {b.value.shape} differ")
    return _emit(tape, a.value + b.value, (a, b), lambda g: (g, g))


def scale_one_plus(x: Var, eps: Var, tape: Optional[Tape] = None) -> Var:
    """``(1 + eps) * x`` for a scalar parameter ``eps``."""
    xv = x.value
    factor = 1.0 + float(eps.value.reshape(()))

    def fn(g):
        return g * factor, np.reshape(np.sum(g * xv), eps.value.shape)

    return _emit(tape, factor * xv, (x, eps), fn)


def spmm(matrix: sp.spmatrix, x: Var, tape: Optional[Tape] = None) -> Var:
    """Product with a constant sparse matrix (gathers, scatters and sum pools)."""
    if matrix.shape[1] != x.value.shape[0]:
        raise ValueError(f"spmm: matrix {matrix.shape} does not match input {x.value.shape}")

    def fn(g):
        return (np.asarray(matrix.T @ g),)

    return _emit(tape, np.asarray(matrix @ x.value), (x,), fn)


def segment_max(x: Var, segment: np.ndarray, n_segments: int, tape: Optional[Tape] = None) -> Var:
    """Column-wise max over rows sharing a segment id; empty segments give 0."""
    xv = x.value
    out = np.full((n_segments, xv.shape[1]), -np.inf)
    np.maximum.at(out, segment, xv)
    empty = ~np.isfinite(out)
    out[empty] = 0.0
    # the gradient goes to the first row attaining the max
    hit = (xv == out[segment]) & ~empty[segment]
    first = np.zeros_like(hit)
    for c in range(xv.shape[1]):
        rows = np.flatnonzero(hit[:, c])
        _, idx = np.unique(segment[rows], return_index=True)
        first[rows[idx], c] = True

    def fn(g):
        return (np.where(first, g[segment], 0.0),)

    return _emit(tape, out, (x,), fn, first)


def concat(parts: Sequence[Var], tape: Optional[Tape] = None) -> Var:
    widths = np.cumsum([0] + [p.value.shape[1] for p in parts])

    def fn(g):
        return tuple(g[:, widths[i]:widths[i + 1]] for i in range(len(parts)))

    return _emit(tape, np.concatenate([p.value for p in parts], axis=1), tuple(parts), fn)


def sigmoid(x: Var, tape: Optional[Tape] = None) -> Var:
    xv = x.value
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ez = np.exp(xv[~pos])
    out[~pos] = ez / (1.0 + ez)

    def fn(g):
        return (g * out * (1.0 - out),)

    return _emit(tape, out, (x,), fn)


def bce_loss(pred: Var, target, tape: Optional[Tape] = None) -> Var:
    """Mean binary cross-entropy of probabilities against {0, 1} targets."""
    y = np.asarray(target, dtype=np.float64)
    if y.shape != pred.value.shape:
        raise ValueError(f"bce_loss: prediction {pred.value.shape} vs target {y.shape}")
    raw = pred.value
    p = np.clip(raw, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (raw >= BCE_CLAMP) & (raw <= 1.0 - BCE_CLAMP)
    n = y.size
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))

    def fn(g):
        d = (-(y / p) + (1.0 - y) / (1.0 - p)) / n
        return (g * d * inside,)

    return _emit(tape, np.asarray(loss), (pred,), fn, inside)


# --- layers -------------------------------------------------------------------


class Mode(str, enum.Enum):
    TRAIN = "Train"
    EVAL = "Eval"


class Module:
    def named_parameters(self, prefix: str = "") -> list[tuple[str, Param]]:
        out = []
        for name, val in vars(self).items():
            if isinstance(val, Param):
                out.append((prefix + name, val))
            elif isinstance(val, Module):
                out += val.named_parameters(prefix + name + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out += item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Param):
                        out.append((f"{prefix}{name}.{i}", item))
        return out

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> list["Module"]:
        out = [self]
        for val in vars(self).values():
            if isinstance(val, Module):
                out += val.modules()
            elif isinstance(val, list):
                for item in val:
                    if isinstance(item, Module):
                        out += item.modules()
        return out

    def set_mode(self, mode: Mode) -> None:
        for m in self.modules():
            if isinstance(m, BatchNorm1d):
                m.mode = Mode(mode)

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state (batch-norm running statistics)."""
        out = {}
        for path, m in self._named_modules():
            if isinstance(m, BatchNorm1d):
                out[path + "running_mean"] = m.running_mean
                out[path + "running_var"] = m.running_var
        return out

    def _named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield from val._named_modules(prefix + name + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item._named_modules(f"{prefix}{name}.{i}.")


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Dense(Module):
    """Affine map ``x W^T + b``.

    A layer feeding batch norm is built without ``b``: the normalisation
    removes any constant shift, so the bias would only carry a gradient that
    is identically zero.
    """

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, *, bias: bool = True):
        self.weight = Param(_uniform_init(rng, n_in, (n_out, n_in)), "weight")
        self.bias = Param(_uniform_init(rng, n_in, (n_out,)), "bias") if bias else None

    @property
    def n_in(self) -> int:
        return self.weight.value.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.value.shape[0]

    def __call__(self, x: Var, tape: Optional[Tape] = None) -> Var:
        return linear(x, self.weight, self.bias, tape)


class BatchNorm1d(Module):
    """Per-feature normalisation over the rows of a batch.

    Train mode normalises with the biased batch variance and updates the
    running statistics (unbiased variance, momentum 0.1); Eval mode uses the
    running statistics.
    """

    def __init__(self, dim: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        self.gamma = Param(np.ones(dim), "gamma")
        self.beta = Param(np.zeros(dim), "beta")
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.eps = eps
        self.momentum = momentum
        self.mode = Mode.TRAIN

    def __call__(self, x: Var, tape: Optional[Tape] = None) -> Var:
        xv = x.value
        if xv.ndim != 2 or xv.shape[1] != self.gamma.value.shape[0]:
            raise ValueError(f"batch norm: input {xv.shape} does not match dim {self.gamma.value.shape[0]}")
        gamma = self.gamma.value
        if self.mode is Mode.EVAL:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (xv - self.running_mean) * inv

            def fn_eval(g):
                return g * gamma * inv, np.sum(g * xhat, axis=0), g.sum(axis=0)

            return _emit(tape, xhat * gamma + self.beta.value, (x, self.gamma, self.beta), fn_eval)
        n = xv.shape[0]
        mean = xv.mean(axis=0)
        var = xv.var(axis=0)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (xv - mean) * inv
        unbiased = var * n / (n - 1) if n > 1 else var
        self.running_mean = (1.0 - self.momentum) * self.running_mean + self.momentum * mean
        self.running_var = (1.0 - self.momentum) * self.running_var + self.momentum * unbiased

        def fn_train(g):
            gh = g * gamma
            gx = inv * (gh - gh.mean(axis=0) - xhat * np.mean(gh * xhat, axis=0))
            return gx, np.sum(g * xhat, axis=0), g.sum(axis=0)

        return _emit(tape, xhat * gamma + self.beta.value, (x, self.gamma, self.beta), fn_train)


class Activation(str, enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"


class Mlp(Module):
    """Stack of Dense -> BatchNorm1d (optional) -> activation."""

    def __init__(
        self,
        dims: Sequence[int],
        rng: np.random.Generator,
        *,
        activations: Optional[Sequence[Activation]] = None,
        batch_norm: Optional[Sequence[bool]] = None,
    ):
        if len(dims) < 2:
            raise ValueError("an MLP needs at least input and output dims")
        n_layers = len(dims) - 1
        activations = list(activations or [Activation.RELU] * n_layers)
        batch_norm = list(batch_norm if batch_norm is not None else [True] * n_layers)
        if len(activations) != n_layers or len(batch_norm) != n_layers:
            raise ValueError("one activation and batch-norm flag per layer")
        self.dense = [Dense(dims[i], dims[i + 1], rng, bias=not batch_norm[i]) for i in range(n_layers)]
        self.norm = [BatchNorm1d(dims[i + 1]) if batch_norm[i] else None for i in range(n_layers)]
        self.activations = [Activation(a) for a in activations]

    @property
    def n_in(self) -> int:
        return self.dense[0].n_in

    @property
    def n_out(self) -> int:
        return self.dense[-1].n_out

    def __call__(self, x: Var, tape: Optional[Tape] = None) -> Var:
        if x.value.ndim != 2 or x.value.shape[1] != self.n_in:
            raise ValueError(f"MLP expects {self.n_in} input columns, got shape {x.value.shape}")
        for dense, norm, act in zip(self.dense, self.norm, self.activations):
            x = dense(x, tape)
            if norm is not None:
                x = norm(x, tape)
            if act is Activation.RELU:
                x = relu(x, tape)
        return x


def mlp_forward(mlp: Mlp, x, tape: Optional[Tape] = None) -> Var:
    return mlp(x if isinstance(x, Var) else Var(x), tape)


# --- optimiser ----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step,
            "m": [a.tolist() for a in self.m], "v": [a.tolist() for a in self.v],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AdamState":
        return cls(doc["lr"], doc["beta1"], doc["beta2"], doc["eps"], doc["step"],
                   [np.array(a, dtype=np.float64) for a in doc["m"]],
                   [np.array(a, dtype=np.float64) for a in doc["v"]])


def adam_step(params: Sequence[Param], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(grads):
        raise ValueError("one gradient per parameter")
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.value.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        p.value = p.value - state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
    return state


# --- verification -------------------------------------------------------------


def grad_check(
    loss_fn: Callable[[Optional[Tape]], Var],
    params: Sequence[Param],
    *,
    h: float = 1e-5,
    n_samples: int = 100,
    seed: int = 0,
) -> float:
    """Max relative error between backward and central differences.

    ``loss_fn(tape)`` must be a deterministic function of the parameter values.
    Entries are drawn uniformly over all parameters (all of them when there
    are fewer than ``n_samples``). An entry whose +-h probes land on different
    sides of a ReLU, max or clamp kink is replaced by another draw, since the
    loss is not differentiable across that interval.
    """
    tape = Tape()
    loss = loss_fn(tape)
    base = tape.branches()
    backward(tape, loss, params)
    analytic = [p.grad.copy() for p in params]
    slots = [(i, j) for i, p in enumerate(params) for j in range(p.value.size)]
    order = np.random.default_rng(seed).permutation(len(slots))

    def probe(flat, j, value):
        flat[j] = value
        t = Tape()
        out = loss_fn(t).value.item()
        same = all(np.array_equal(a, b) for a, b in zip(t.branches(), base))
        return out, same

    worst = 0.0
    checked = skipped = 0
    for k in order:
        if checked == n_samples:
            break
        i, j = slots[k]
        flat = params[i].value.reshape(-1)
        orig = flat[j]
        up, smooth_up = probe(flat, j, orig + h)
        down, smooth_down = probe(flat, j, orig - h)
        flat[j] = orig
        if not (smooth_up and smooth_down):
            skipped += 1
            continue
        numeric = (up - down) / (2.0 * h)
        a = float(analytic[i].reshape(-1)[j])
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
        checked += 1
    log.debug("grad_check: %d entries compared, %d skipped at kinks", checked, skipped)
    return worst


# --- state snapshots ----------------------------------------------------------


def state_dict(module: Module) -> dict[str, np.ndarray]:
    out = {name: p.value.copy() for name, p in module.named_parameters()}
    out.update({name: v.copy() for name, v in module.buffers().items()})
    return out


def load_state_dict(module: Module, state: dict[str, np.ndarray]) -> None:
    params = dict(module.named_parameters())
    expected = set(params) | set(module.buffers())
    if set(state) != expected:
        missing = sorted(expected - set(state))[:3]
        extra = sorted(set(state) - expected)[:3]
        raise ValueError(f"state does not match model (missing {missing}, unexpected {extra})")
    for name, p in params.items():
        arr = np.asarray(state[name], dtype=np.float64)
        if arr.shape != p.value.shape:
            raise ValueError(f"{name}: shape {arr.shape} does not match {p.value.shape}")
        p.value = arr.copy()
    for path, m in module._named_modules():
        if isinstance(m, BatchNorm1d):
            for key in ("running_mean", "running_var"):
                arr = np.asarray(state[path + key], dtype=np.float64)
                if arr.shape != getattr(m, key).shape:
                    raise ValueError(f"{path + key}: shape mismatch")
                setattr(m, key, arr.copy())
