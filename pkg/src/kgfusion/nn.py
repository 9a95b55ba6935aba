"""Parameter containers and Transformer building blocks on the autodiff substrate.

Modules register parameters in insertion order, so ``named_params`` yields a
stable layout for optimizers and checkpoints. Parameters are immutable during
a forward pass; training updates happen between passes.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base container; subclasses register parameters and child modules."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}

    def param(self, name: str, array: np.ndarray, dtype) -> Tensor:
        t = ad.parameter(array, dtype=dtype)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module"):
        self._children[name] = module
        return module

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for name, child in self._children.items():
            yield from child.named_params(prefix + name + ".")

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype):
        super().__init__()
        self.w = self.param("w", rng.normal(0.0, n_in ** -0.5, size=(n_in, n_out)), dtype)
        self.b = self.param("b", np.zeros(n_out), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)


class LayerNorm(Module):
    """Last-axis normalization with learnable gain and bias."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.g = self.param("g", np.ones(dim), dtype)
        self.b = self.param("b", np.zeros(dim), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.mul(ad.layer_norm(x, self.eps), self.g), self.b)


class Embedding(Module):
    def __init__(self, n_rows: int, dim: int, rng: np.random.Generator, dtype, std: float = 0.02):
        super().__init__()
        self.table = self.param("table", rng.normal(0.0, std, size=(n_rows, dim)), dtype)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ad.embedding(self.table, ids)


class SelfAttention(Module):
    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator, dtype):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"width {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        std = dim ** -0.5
        for name in ("wq", "wk", "wv", "wo"):
            self.param(name, rng.normal(0.0, std, size=(dim, dim)), dtype)
        for name in ("bq", "bk", "bv", "bo"):
            self.param(name, np.zeros(dim), dtype)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        p = self._params
        return ad.multi_head_attention(
            x, p["wq"], p["wk"], p["wv"], p["wo"],
            p["bq"], p["bk"], p["bv"], p["bo"],
            self.n_heads, key_mask=key_mask)


def drop_path(x: Tensor, branch: Tensor, rate: float,
              rng: np.random.Generator | None, training: bool) -> Tensor:
    """Residual add with stochastic branch skip (per sample); identity in eval mode."""
    if not training or rate <= 0.0:
        return ad.add(x, branch)
    if rng is None:
        raise ValueError("drop_path in training mode needs an rng")
    keep = 1.0 - rate
    shape = (branch.shape[0],) + (1,) * (len(branch.shape) - 1)
    mask = (rng.random(shape) < keep).astype(branch.data.dtype) / branch.data.dtype.type(keep)
    return ad.add(x, ad.mul(branch, ad.constant(mask)))


class TransformerBlock(Module):
    """Pre-norm block: attention and MLP branches, each behind drop-path."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: int,
                 rng: np.random.Generator, dtype):
        super().__init__()
        self.ln1 = self.child("ln1", LayerNorm(dim, rng, dtype))
        self.attn = self.child("attn", SelfAttention(dim, n_heads, rng, dtype))
        self.ln2 = self.child("ln2", LayerNorm(dim, rng, dtype))
        self.fc1 = self.child("fc1", Linear(dim, dim * mlp_ratio, rng, dtype))
        self.fc2 = self.child("fc2", Linear(dim * mlp_ratio, dim, rng, dtype))

    def __call__(self, x: Tensor, key_mask=None, drop_rate: float = 0.0,
                 rng=None, training: bool = False) -> Tensor:
        x = drop_path(x, self.attn(self.ln1(x), key_mask), drop_rate, rng, training)
        x = drop_path(x, self.fc2(ad.gelu(self.fc1(self.ln2(x)))), drop_rate, rng, training)
        return x


class TransformerStack(Module):
    """A chain of blocks plus a final norm; with zero layers it is the identity."""

    def __init__(self, n_layers: int, dim: int, n_heads: int, mlp_ratio: int,
                 rng: np.random.Generator, dtype):
        super().__init__()
        self.n_layers = n_layers
        self.blocks = [
            self.child(f"block{i}", TransformerBlock(dim, n_heads, mlp_ratio, rng, dtype))
            for i in range(n_layers)
        ]
        if n_layers > 0:
            self.ln_out = self.child("ln_out", LayerNorm(dim, rng, dtype))

    def __call__(self, x: Tensor, key_mask=None, drop_rate: float = 0.0,
                 rng=None, training: bool = False) -> Tensor:
        for block in self.blocks:
            x = block(x, key_mask=key_mask, drop_rate=drop_rate, rng=rng, training=training)
        if self.n_layers > 0:
            x = self.ln_out(x)
        return x


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``x`` (B, L, D) over positions where ``mask`` (B, L) is nonzero."""
    m = np.asarray(mask, dtype=x.data.dtype)
    weights = m / m.sum(axis=-1, keepdims=True)
    return ad.sum_(ad.mul(x, ad.constant(weights[..., None])), axis=1)
