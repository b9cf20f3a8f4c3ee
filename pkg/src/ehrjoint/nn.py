"""Parameter containers and transformer building blocks on top of autodiff."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return np.ascontiguousarray(out)


class Module:
    """Minimal parameter tree: attributes that are Tensors or Modules are children."""

    training = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy arrays into matching parameters; returns the loaded paths."""
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={unexpected[:5]}")
        loaded = []
        for k, arr in state.items():
            if k not in own:
                continue
            if own[k].shape != arr.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {own[k].shape}")
            own[k].data[...] = arr
            loaded.append(k)
        return loaded


def param(data) -> Tensor:
    return Tensor(np.ascontiguousarray(data, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = param(truncated_normal(rng, (n_in, n_out), std))
        self.bias = param(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-12):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = param(truncated_normal(rng, (n, dim), std))

    def __call__(self, ids) -> Tensor:
        return ad.embedding(self.weight, ids)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with additive mask, heads concatenated."""

    def __init__(self, hidden: int, heads: int, rng: np.random.Generator, std: float = 0.02,
                 dropout: float = 0.0):
        if hidden % heads:
            raise ValueError(f"hidden size {hidden} not divisible by {heads} heads")
        self.heads = heads
        self.d_k = hidden // heads
        self.query = Linear(hidden, hidden, rng, std)
        self.key = Linear(hidden, hidden, rng, std)
        self.value = Linear(hidden, hidden, rng, std)
        self.output = Linear(hidden, hidden, rng, std)
        self.dropout = dropout
        self.last_attention: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.d_k).transpose(0, 2, 1, 3)

    def __call__(self, h_q: Tensor, h_kv: Tensor, mask: np.ndarray | None,
                 rng: np.random.Generator | None = None) -> Tensor:
        b, nq, d = h_q.shape
        q = self._split(self.query(h_q))
        k = self._split(self.key(h_kv))
        v = self._split(self.value(h_kv))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(self.d_k))
        probs = ad.masked_softmax(scores, mask)
        self.last_attention = probs.data
        probs = ad.dropout(probs, self.dropout, rng, self.training)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, nq, d)
        return self.output(ctx)


class AttentionBlock(Module):
    """Multi-head attention followed by residual connection and layer norm."""

    def __init__(self, hidden: int, heads: int, rng, std=0.02, dropout=0.0, eps=1e-12):
        self.attention = MultiHeadAttention(hidden, heads, rng, std, dropout)
        self.norm = LayerNorm(hidden, eps)
        self.dropout = dropout

    def __call__(self, h_q, h_kv, mask, rng=None) -> Tensor:
        out = ad.dropout(self.attention(h_q, h_kv, mask, rng), self.dropout, rng, self.training)
        return self.norm(out + h_q)


class FeedForward(Module):
    """Position-wise two-layer network with gelu, residual and layer norm."""

    def __init__(self, hidden: int, inner: int, rng, std=0.02, dropout=0.0, eps=1e-12):
        self.inner = Linear(hidden, inner, rng, std)
        self.outer = Linear(inner, hidden, rng, std)
        self.norm = LayerNorm(hidden, eps)
        self.dropout = dropout

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        h = self.outer(ad.gelu(self.inner(x)))
        return self.norm(ad.dropout(h, self.dropout, rng, self.training) + x)


class TransformerLayer(Module):
    """Attention block then feed-forward block, each with residual + norm."""

    def __init__(self, hidden, heads, inner, rng, std=0.02, dropout=0.0, eps=1e-12):
        self.attn = AttentionBlock(hidden, heads, rng, std, dropout, eps)
        self.ffn = FeedForward(hidden, inner, rng, std, dropout, eps)

    def __call__(self, h_q, h_kv, mask, rng=None) -> Tensor:
        return self.ffn(self.attn(h_q, h_kv, mask, rng), rng)


def attention_sublayer(h_q: Tensor, h_kv: Tensor, mask, layer: TransformerLayer, rng=None) -> Tensor:
    return layer(h_q, h_kv, mask, rng)
