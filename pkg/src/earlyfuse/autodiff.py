"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

A tape-free DAG design: every op returns a new `Tensor` that remembers its
parents and a vector-Jacobian closure. `backward` walks the graph in reverse
topological order and accumulates gradients into leaf tensors that were
created with ``requires_grad=True``.

Conventions:
  * all tensor data is float64, row-major;
  * every op validates that its output is finite (NaN/Inf raises),
  * integer index arrays (token ids, gather positions) are plain numpy
    arrays, never Tensors.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Finite stand-in for -inf in attention masking; exp(-1e30) == 0.0 in float64,
# so softmax treats it exactly like -inf while every stored value stays finite.
VERY_NEGATIVE = -1e30

_node_counter = itertools.count()


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def _check_finite(arr: np.ndarray, op: str, node_id: int) -> None:
    if arr.size and not (np.isfinite(arr.min()) and np.isfinite(arr.max())):
        raise NonFiniteError(f"non-finite values in op '{op}' (node {node_id})")


class Tensor:
    """Dense float64 array node in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "parents", "vjp")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        vjp: Callable[[np.ndarray], tuple] | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        self.node_id = next(_node_counter)
        _check_finite(arr, op, self.node_id)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """Leaf tensor that will receive a gradient."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        # constant folding: keep the graph free of dead branches
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=tuple(parents), vjp=vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach `grad.shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _make("add", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _make("sub", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _make("mul", out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    out = np.where(a.data >= 0, out, 1.0 - out)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed stably for large |x|."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def back(g):
        s = 1.0 / (1.0 + np.exp(-np.abs(x)))
        s = np.where(x >= 0, s, 1.0 - s)
        return (g * s,)

    return _make("softplus", out, (a,), back)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x) with the Gaussian CDF."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (phi + x * pdf),)

    return _make("gelu", out, (a,), back)


# ---------------------------------------------------------------------------
# matmul / reductions
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim>=2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    if a.ndim == 2 and b.ndim > 2:
        raise ShapeError(f"matmul does not broadcast a 2-D left operand: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        # same-rank operands (matching batch dims or plain 2-D)
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    def back_b2d(g):
        # a (..., m, k) @ b (k, n): flatten batch for one big gemm each way
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gb = a2.T @ g2
        return ga, gb

    vjp = back_b2d if (b.ndim == 2 and a.ndim > 2) else back
    return _make("matmul", out, (a, b), vjp)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", out, (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.shape[axis]

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _make("mean", out, (a,), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax", out, (a,), back)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    s = np.exp(x - m).sum(axis=axis, keepdims=True)
    lse = m + np.log(s)
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def back(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        soft = np.exp(x - lse)
        return (soft * g,)

    return _make("logsumexp", out, (a,), back)


# ---------------------------------------------------------------------------
# normalization / activation blocks
# ---------------------------------------------------------------------------

LAYER_NORM_EPS = 1e-12


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis; gamma/beta have shape (d,)."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm params {gamma.shape}/{beta.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gg = g * gamma.data
        gmean = gg.mean(axis=-1, keepdims=True)
        gxhat = (gg * xhat).mean(axis=-1, keepdims=True)
        dx = (gg - gmean - xhat * gxhat) * inv
        axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        return dx, dgamma, dbeta

    return _make("layer_norm", out, (x, gamma, beta), back)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale slices along `axis` to unit L2 norm. Zero vectors are an error."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(n < 1e-200):
        raise ZeroDivisionError("l2_normalize of a zero vector")
    out = x.data / n

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * dot) / n,)

    return _make("l2_normalize", out, (x,), back)


# ---------------------------------------------------------------------------
# indexing / structure ops
# ---------------------------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: table (V, d), ids int (...) -> (..., d)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make("embedding", out, (table,), back)


def gather_positions(x: Tensor, pos: np.ndarray) -> Tensor:
    """x (B, T, d), pos (B,) -> (B, d): one row per batch element."""
    b = np.arange(x.shape[0])
    out = x.data[b, pos]

    def back(g):
        gx = np.zeros_like(x.data)
        gx[b, pos] = g
        return (gx,)

    return _make("gather_positions", out, (x,), back)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """x (N, ...), idx int (M,) -> (M, ...). Duplicate indices accumulate in backward."""
    out = x.data[idx]

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make("gather_rows", out, (x,), back)


def take_labels(logits: Tensor, labels: np.ndarray) -> Tensor:
    """logits (N, V), labels int (N,) -> (N,): logits[i, labels[i]]."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(f"labels out of range [0, {logits.shape[1]})")
    r = np.arange(logits.shape[0])
    out = logits.data[r, labels]

    def back(g):
        gx = np.zeros_like(logits.data)
        gx[r, labels] = g
        return (gx,)

    return _make("take_labels", out, (logits,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", out, tuple(tensors), back)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def back(g):
        return (np.transpose(g, inv),)

    return _make("transpose", out, (a,), back)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def back(g):
        return (g.reshape(a.shape),)

    return _make("reshape", out, (a,), back)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where mask is True by `value`; gradient flows elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, value, a.data)

    def back(g):
        return (np.where(mask, 0.0, g),)

    return _make("masked_fill", out, (a,), back)


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def back(g):
        gx = np.zeros_like(a.data)
        gx[key] += g
        return (gx,)

    return _make("getitem", out, (a,), back)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Accumulate gradients of a scalar `root` into requires_grad leaves."""
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.vjp is None:  # leaf
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad or pg is None:
                continue
            if id(parent) in grads:
                grads[id(parent)] += pg
            else:
                grads[id(parent)] = pg


def forward_backward(
    fn: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate a scalar-valued graph builder and return (value, grads).

    `fn` receives the parameter dict and must return a scalar Tensor. Every
    parameter with requires_grad gets an entry in the gradient dict (zeros
    if it did not participate).
    """
    for p in params.values():
        p.grad = None
    out = fn(params)
    if out.data.size != 1:
        raise ShapeError(f"graph output must be scalar, got shape {out.shape}")
    backward(out)
    grads = {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
        if p.requires_grad
    }
    return float(out.data), grads


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def finite_difference_check(
    fn: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
) -> float:
    """Max scaled relative error between autodiff and central differences.

    Error for one element is |a - n| / max(|a|, |n|, 1) so that near-zero
    gradients compare absolutely.
    """
    _, grads = forward_backward(fn, params)
    worst = 0.0
    for name, p in params.items():
        if not p.requires_grad:
            continue
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn(params).item()
            flat[i] = orig - h
            dn = fn(params).item()
            flat[i] = orig
            num[i] = (up - dn) / (2.0 * h)
        a = grads[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1.0)
        worst = max(worst, float(np.max(np.abs(a - num) / denom)))
    return worst
