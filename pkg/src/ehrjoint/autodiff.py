"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive records its inputs and a backward closure on the output
tensor.  ``backward`` walks the recorded trace in reverse topological order
and accumulates gradients into every leaf that requires them.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

MASK_VALUE = -1e9
_SQRT2 = np.sqrt(2.0)
_ids = itertools.count()
_grad_enabled = True

diagnostics = {"fully_masked_rows": 0}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable trace recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.id = next(_ids)
        self._parents: tuple[Tensor, ...] = _parents
        self._op = _op
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat view of the data."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), _op=op)
    if needs:
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- trace

@dataclass
class TraceEntry:
    op: str
    inputs: tuple[int, ...]
    output: int


@dataclass
class ComputationTrace:
    entries: list[TraceEntry] = field(default_factory=list)
    tensors: list[Tensor] = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.entries)

    def is_topological(self) -> bool:
        seen = {t.id for t in self.tensors if t.is_leaf}
        for e in self.entries:
            if any(i not in seen for i in e.inputs):
                return False
            seen.add(e.output)
        return True


def trace(root: Tensor) -> ComputationTrace:
    """Collect the recorded primitive applications reachable from ``root``."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in visited:
            continue
        visited.add(node.id)
        stack.append((node, True))
        for p in node._parents:
            if p.id not in visited:
                stack.append((p, False))
    entries = [TraceEntry(t._op, tuple(p.id for p in t._parents), t.id)
               for t in order if not t.is_leaf]
    return ComputationTrace(entries, order)


def backward(loss: Tensor, tr: ComputationTrace | None = None):
    """Propagate d(loss)/d(.) to every tensor in the trace of ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tr = tr if tr is not None else trace(loss)
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(tr.tensors):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if not node.is_leaf:
                # intermediates release their buffers once consumed
                node.grad = None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data ** 2), b.shape))

    return _make(a.data / b.data, (a, b), "div", bw)


def power(a: Tensor, exponent: float) -> Tensor:
    def bw(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1))

    return _make(a.data ** exponent, (a,), "pow", bw)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), "exp", bw)


def log(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), "log", bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bw(g):
        _accumulate(a, g * (1.0 - y * y))

    return _make(y, (a,), "tanh", bw)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)

    def bw(g):
        _accumulate(a, g * y * (1.0 - y))

    return _make(y, (a,), "sigmoid", bw)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def bw(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        _accumulate(a, g * (cdf + x * pdf))

    return _make(x * cdf, (a,), "gelu", bw)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------- shape ops

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        # activations times a weight matrix: fold leading dims into one GEMM
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def bw(g):
            g2 = g.reshape(-1, b.shape[1])
            if a.requires_grad:
                _accumulate(a, (g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                _accumulate(b, a2.T @ g2)

        return _make(out, (a, b), "matmul", bw)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from exc

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out, (a, b), "matmul", bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), "reshape", bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        _accumulate(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), "transpose", bw)


def getitem(a: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accumulate(a, full)

    return _make(a.data[index], (a,), "getitem", bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, part)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; raises on out-of-range ids."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]}): "
                         f"min={ids.min()}, max={ids.max()}")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accumulate(table, full)

    return _make(table.data[ids], (table,), "embedding", bw)


# ---------------------------------------------------------------- fused layers

def masked_softmax(scores: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis of ``scores + mask``.

    Rows whose keys are all masked produce zeros instead of NaN.
    """
    x = scores.data
    dead = None
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
        x = x + m
        allowed = np.broadcast_to(m > MASK_VALUE / 2, x.shape)
        dead = ~allowed.any(axis=-1, keepdims=True)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    if dead is not None and dead.any():
        diagnostics["fully_masked_rows"] += int(dead.sum())
        y = np.where(dead, 0.0, y)

    def bw(g):
        _accumulate(scores, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (scores,), "masked_softmax", bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            _accumulate(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                                  - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), "layer_norm", bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def bw(g):
        _accumulate(x, g * keep)

    return _make(x.data * keep, (x,), "dropout", bw)


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ignored."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    flat = logits.data.reshape(-1, logits.shape[-1])
    if flat.shape[0] != targets.shape[0]:
        raise ShapeError(f"{targets.shape[0]} targets for {flat.shape[0]} logit rows")
    keep = targets != ignore_index
    n = int(keep.sum())
    if n == 0:
        return _make(np.array(0.0), (logits,), "cross_entropy", lambda g: None)
    logp = log_softmax_np(flat)
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, targets[rows]].sum() / n

    def bw(g):
        grad = np.zeros_like(flat)
        grad[rows] = np.exp(logp[rows])
        grad[rows, targets[rows]] -= 1.0
        _accumulate(logits, (g / n) * grad.reshape(logits.shape))

    return _make(np.array(loss), (logits,), "cross_entropy", bw)


def binary_cross_entropy_with_logits(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean BCE; ``weights`` of 0 drop an entry from the mean."""
    z = logits.data
    y = np.asarray(targets, dtype=np.float64).reshape(z.shape)
    w = np.ones_like(z) if weights is None else np.asarray(weights, dtype=np.float64).reshape(z.shape)
    total = w.sum()
    if total == 0:
        return _make(np.array(0.0), (logits,), "bce", lambda g: None)
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = (per * w).sum() / total

    def bw(g):
        _accumulate(logits, g * w * (_sigmoid(z) - y) / total)

    return _make(np.array(loss), (logits,), "bce", bw)


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)))
