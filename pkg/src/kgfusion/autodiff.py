"""Reverse-mode automatic differentiation over dense numpy arrays.

Small tape-based engine: each op produces a new :class:`Tensor` holding the
forward value and a closure that routes the output adjoint to the inputs.
``backward`` runs the closures in reverse topological order, visiting each
node exactly once. Precision follows the input arrays (float32 for training,
float64 for gradient checks); ops never change dtype.

Numerical guards: softmax subtracts the per-row max, layer normalization and
L2 normalization carry an epsilon, so finite inputs give finite outputs.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes; names the op and both shapes."""


class Tensor:
    """A numpy array plus the graph bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Callable[[], None] | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        """Same values, cut from the graph; gradients stop here."""
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar loss, filling ``.grad`` on reachable tensors."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # operator sugar; scalars are lifted to constants
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def constant(data, dtype=None) -> Tensor:
    """A graph leaf that never receives a gradient."""
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _toposort(root: Tensor) -> list[Tensor]:
    # iterative DFS; graphs can be a few thousand nodes deep
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _needs_graph(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def _finalize(out: Tensor, bw: Callable[[], None], *inputs: Tensor) -> Tensor:
    """Attach the backward closure, or prune the node if no input needs gradients."""
    if _needs_graph(*inputs):
        out._backward = bw
    else:
        out._parents = ()
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over axes that were broadcast so it matches ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from None
    out = Tensor(data, _parents=(a, b))

    def _bw():
        a._accumulate(_unbroadcast(out.grad, a.shape))
        b._accumulate(_unbroadcast(out.grad, b.shape))

    return _finalize(out, _bw, a, b)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, _parents=(a,))
    return _finalize(out, lambda: a._accumulate(-out.grad), a)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from None
    out = Tensor(data, _parents=(a, b))

    def _bw():
        a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        b._accumulate(_unbroadcast(out.grad * a.data, b.shape))

    return _finalize(out, _bw, a, b)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * a.data.dtype.type(s), _parents=(a,))
    return _finalize(out, lambda: a._accumulate(out.grad * a.data.dtype.type(s)), a)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    out = Tensor(data, _parents=(a,))
    return _finalize(out, lambda: a._accumulate(out.grad * data), a)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b))

    def _bw():
        a._accumulate(_unbroadcast(out.grad @ b.data.swapaxes(-1, -2), a.shape))
        b._accumulate(_unbroadcast(a.data.swapaxes(-1, -2) @ out.grad, b.shape))

    return _finalize(out, _bw, a, b)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    base = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(base):
            raise ShapeError(f"concat: {base} vs {t.shape}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), _parents=tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _bw():
        for t, g in zip(tensors, np.split(out.grad, splits, axis=axis)):
            t._accumulate(g)

    return _finalize(out, _bw, *tensors)


def take(a: Tensor, key) -> Tensor:
    """Slice / integer-array indexing; backward scatter-adds into the source."""
    out = Tensor(a.data[key], _parents=(a,))

    def _bw():
        g = np.zeros_like(a.data)
        np.add.at(g, key, out.grad)
        a._accumulate(g)

    return _finalize(out, _bw, a)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape), _parents=(a,))
    return _finalize(out, lambda: a._accumulate(out.grad.reshape(a.shape)), a)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)
    out = Tensor(a.data.transpose(axes), _parents=(a,))
    return _finalize(out, lambda: a._accumulate(out.grad.transpose(inv)), a)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into an embedding table; gradient scatter-adds per id."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {table.shape}")
    out = Tensor(table.data[ids], _parents=(table,))

    def _bw():
        g = np.zeros_like(table.data)
        np.add.at(g, ids, out.grad)
        table._accumulate(g)

    return _finalize(out, _bw, table)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims), _parents=(a,))
    n = a.data.size if axis is None else a.shape[axis]

    def _bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape) / a.data.dtype.type(n))

    return _finalize(out, _bw, a)


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), _parents=(a,))

    def _bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _finalize(out, _bw, a)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh form."""
    c = a.data.dtype.type(math.sqrt(2.0 / math.pi))
    k = a.data.dtype.type(0.044715)
    x = a.data
    x2 = x * x
    t = np.tanh(c * (x + k * (x2 * x)))
    out = Tensor(0.5 * x * (1.0 + t), _parents=(a,))

    def _bw():
        du = c * (1.0 + 3 * k * x2)
        a._accumulate(out.grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _finalize(out, _bw, a)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine part)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.data.dtype.type(eps))
    xhat = (x - mu) * inv
    out = Tensor(xhat, _parents=(a,))

    def _bw():
        g = out.grad
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        a._accumulate(inv * (g - gm - xhat * gx))

    return _finalize(out, _bw, a)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; rows sum to one."""
    x = a.data
    y = np.exp(x - x.max(axis=axis, keepdims=True))
    y /= y.sum(axis=axis, keepdims=True)
    out = Tensor(y, _parents=(a,))

    def _bw():
        g = out.grad
        a._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _finalize(out, _bw, a)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y, _parents=(a,))

    def _bw():
        g = out.grad
        a._accumulate(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _finalize(out, _bw, a)


def l2_normalize(a: Tensor, eps: float = 1e-24) -> Tensor:
    """Rows scaled to unit Euclidean norm along the last axis (eps-guarded)."""
    x = a.data
    sq = (x * x).sum(axis=-1, keepdims=True)
    n = np.sqrt(sq + a.data.dtype.type(eps))
    out = Tensor(x / n, _parents=(a,))

    def _bw():
        g = out.grad
        dots = (g * x).sum(axis=-1, keepdims=True)
        a._accumulate(g / n - x * dots / (n ** 3))

    return _finalize(out, _bw, a)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (N, C) against integer labels."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy: {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"cross_entropy: label out of range for {logits.shape[1]} classes")
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    n = labels.shape[0]
    out = Tensor(np.asarray(-logp[np.arange(n), labels].mean(), dtype=x.dtype),
                 _parents=(logits,))

    def _bw():
        g = np.exp(logp)
        g[np.arange(n), labels] -= 1.0
        logits._accumulate(g * (out.grad / x.dtype.type(n)))

    return _finalize(out, _bw, logits)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Matrix of cosines: rows of ``a`` (N, d) against rows of ``b`` (M, d)."""
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_similarity: {a.shape} vs {b.shape}")
    bn = l2_normalize(b)
    return matmul(l2_normalize(a), transpose(bn, (1, 0)))


def kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Mean over rows of KL(softmax(p) || softmax(q)); detach ``p`` to freeze it."""
    if p_logits.shape != q_logits.shape:
        raise ShapeError(f"kl_divergence: {p_logits.shape} vs {q_logits.shape}")
    logp = log_softmax(p_logits)
    p = softmax(p_logits)
    per_elem = mul(p, add(logp, neg(log_softmax(q_logits))))
    rows = p_logits.data.size // p_logits.shape[-1]
    return scale(sum_(per_elem), 1.0 / rows)


def multi_head_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                         bq: Tensor, bk: Tensor, bv: Tensor, bo: Tensor,
                         n_heads: int, key_mask: np.ndarray | None = None) -> Tensor:
    """Self-attention over ``x`` (B, L, D) with D split across ``n_heads``.

    ``key_mask``: optional (B, L) array, 1 for attendable keys; masked keys get
    -1e9 added to their scores, which underflows to exactly zero weight.
    """
    b, length, dim = x.shape
    if dim % n_heads:
        raise ShapeError(f"attention: width {dim} not divisible by {n_heads} heads")
    dh = dim // n_heads

    def split_heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (b, length, n_heads, dh)), (0, 2, 1, 3))

    q = split_heads(add(matmul(x, wq), bq))
    k = split_heads(add(matmul(x, wk), bk))
    v = split_heads(add(matmul(x, wv), bv))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if key_mask is not None:
        bias = (1.0 - np.asarray(key_mask, dtype=x.data.dtype)) * x.data.dtype.type(-1e9)
        scores = add(scores, constant(bias.reshape(b, 1, 1, length)))
    attn = softmax(scores)
    ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (b, length, dim))
    return add(matmul(ctx, wo), bo)


# ---------------------------------------------------------------------------
# gradient extraction and checking
# ---------------------------------------------------------------------------

def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def gradients(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradient of a scalar loss per parameter; unreachable parameters get exact zeros."""
    zero_grads(params)
    loss.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def grad_check(f: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[Tensor],
               eps: float = 1e-4, max_coords_per_tensor: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients of scalar ``f`` against central differences.

    Returns max over checked coordinates of |analytic - numeric| / max(1, |numeric|).
    ``f`` must rebuild its graph on every call. With ``max_coords_per_tensor``
    set, a random subset of coordinates per input is probed (for big inputs);
    by default every coordinate is checked. Run at float64.
    """
    analytic = gradients(f(inputs), inputs)
    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for t, g in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_tensor is not None and flat.size > max_coords_per_tensor:
            coords = rng.choice(flat.size, size=max_coords_per_tensor, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            hi = float(f(inputs).data)
            flat[c] = orig - eps
            lo = float(f(inputs).data)
            flat[c] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(float(g.reshape(-1)[c]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
