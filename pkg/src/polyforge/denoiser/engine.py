"""Minimal reverse-mode differentiation over numpy arrays.

Purpose-built for the two fixed architectures in this package (the U-Net
noise predictor and the reference localizer).  Ops preserve the dtype of
their inputs, so the same graph runs in float32 for training and float64
for finite-difference verification.

A node without `requires` never records parents or backward closures, so
inference passes keep no caches and cost nothing beyond the raw numpy work.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .. import _kernels
from ..errors import NumericError, ShapeError


class Var:
    """A value in the computation graph."""

    __slots__ = ("value", "grad", "requires", "_parents", "_vjp")

    def __init__(
        self,
        value,
        requires: bool = False,
        parents: tuple = (),
        vjp: Callable | None = None,
    ):
        self.value = np.asarray(value)
        self.requires = requires
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

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

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires={self.requires})"


def lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _node(value, parents: Sequence[Var], vjp: Callable) -> Var:
    if any(p.requires for p in parents):
        return Var(value, requires=True, parents=tuple(parents), vjp=vjp)
    return Var(value)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(root: Var) -> None:
    """Accumulate gradients of a scalar `root` into every requiring leaf."""
    if root.value.size != 1:
        raise ShapeError("backward expects a scalar root")
    if not np.isfinite(root.value):
        raise NumericError("loss is non-finite")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if g is None or not parent.requires:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b) -> Var:
    # python scalars stay weak so float32 graphs are not promoted
    if isinstance(b, (int, float)):
        a = lift(a)
        return _node(a.value + b, (a,), lambda g: (g,))
    if isinstance(a, (int, float)):
        return add(b, a)
    a, b = lift(a), lift(b)
    out = a.value + b.value
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def sub(a, b) -> Var:
    if isinstance(b, (int, float)):
        a = lift(a)
        return _node(a.value - b, (a,), lambda g: (g,))
    if isinstance(a, (int, float)):
        s = float(a)
        b = lift(b)
        return _node(s - b.value, (b,), lambda g: (-g,))
    a, b = lift(a), lift(b)
    out = a.value - b.value
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)),
    )


def mul(a, b) -> Var:
    if isinstance(b, (int, float)):
        a = lift(a)
        s = float(b)
        return _node(a.value * s, (a,), lambda g: (g * s,))
    if isinstance(a, (int, float)):
        return mul(b, a)
    a, b = lift(a), lift(b)
    out = a.value * b.value
    return _node(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def square(a) -> Var:
    a = lift(a)
    return _node(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,))


def mean(a) -> Var:
    a = lift(a)
    inv = 1.0 / a.value.size
    return _node(
        np.asarray(a.value.mean()),
        (a,),
        lambda g: (np.full_like(a.value, float(g) * inv),),
    )


def total(a) -> Var:
    a = lift(a)
    return _node(np.asarray(a.value.sum()), (a,), lambda g: (np.full_like(a.value, float(g)),))


def silu(a) -> Var:
    a = lift(a)
    sig = 1.0 / (1.0 + np.exp(-a.value))
    out = a.value * sig
    return _node(out, (a,), lambda g: (g * sig * (1.0 + a.value * (1.0 - sig)),))


def sigmoid(a) -> Var:
    a = lift(a)
    sig = 1.0 / (1.0 + np.exp(-a.value))
    return _node(sig, (a,), lambda g: (g * sig * (1.0 - sig),))


def softmax_last(a) -> Var:
    a = lift(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), vjp)


def bce_with_logits(logits, target: np.ndarray) -> Var:
    """Elementwise binary cross-entropy on raw logits (numerically stable)."""
    a = lift(logits)
    x = a.value
    out = np.maximum(x, 0) - x * target + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        return (g * (sig - target),)

    return _node(out, (a,), vjp)


def smooth_l1(pred, target: np.ndarray) -> Var:
    """Elementwise Huber loss with unit transition point."""
    a = lift(pred)
    d = a.value - target
    ad = np.abs(d)
    out = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    return _node(out, (a,), lambda g: (g * np.clip(d, -1.0, 1.0),))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Var:
    a = lift(a)
    old = a.value.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Var:
    a = lift(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(parts: Sequence, axis: int) -> Var:
    parts = [lift(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(parts), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Var:
    a, b = lift(a), lift(b)
    out = a.value @ b.value

    def vjp(g):
        av, bv = a.value, b.value
        ga = g @ np.swapaxes(bv, -1, -2) if bv.ndim > 1 else np.outer(g, bv)
        gb = np.swapaxes(av, -1, -2) @ g if av.ndim > 1 else np.outer(av, g)
        return (_unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape))

    return _node(out, (a, b), vjp)


def linear(x, w, b) -> Var:
    """x @ w + b with x (..., D), w (D, K), b (K,)."""
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# spatial ops


def conv2d(x, w, b, pad: str = "zero") -> Var:
    """Same-padding 2D convolution.

    x: (N, Cin, H, W); w: (Cout, Cin, k, k) with k odd; b: (Cout,).
    """
    x, w, b = lift(x), lift(w), lift(b)
    n, cin, h, wd = x.value.shape
    cout, cin_w, k, k2 = w.value.shape
    if cin != cin_w or k != k2 or k % 2 == 0:
        raise ShapeError(
            f"conv2d weight {w.value.shape} incompatible with input {x.value.shape}"
        )
    w2 = w.value.reshape(cout, cin * k * k)
    if k == 1:
        cols = x.value.transpose(1, 0, 2, 3).reshape(cin, n * h * wd)
    else:
        cols = _kernels.im2col(x.value, k, pad)
    y = w2 @ cols
    y = y.reshape(cout, n, h, wd).transpose(1, 0, 2, 3)
    out = y + b.value.reshape(1, cout, 1, 1)

    def vjp(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, n * h * wd)
        gw = (g2 @ cols.T).reshape(w.value.shape)
        gb = g.sum(axis=(0, 2, 3))
        gcols = w2.T @ g2
        if k == 1:
            gx = gcols.reshape(cin, n, h, wd).transpose(1, 0, 2, 3)
        else:
            gx = _kernels.col2im(gcols, n, cin, h, wd, k, pad)
        return (gx, gw, gb)

    return _node(out, (x, w, b), vjp)


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5) -> Var:
    """GroupNorm over (N, C, H, W) with per-channel affine."""
    x, gamma, beta = lift(x), lift(gamma), lift(beta)
    n, c, h, w = x.value.shape
    if c % groups:
        raise ShapeError(f"channels {c} not divisible by {groups} groups")
    m = (c // groups) * h * w
    xg = x.value.reshape(n, groups, m)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv
    xhat4 = xhat.reshape(n, c, h, w)
    out = xhat4 * gamma.value.reshape(1, c, 1, 1) + beta.value.reshape(1, c, 1, 1)

    def vjp(g):
        ggamma = (g * xhat4).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = (g * gamma.value.reshape(1, c, 1, 1)).reshape(n, groups, m)
        mean_d = dxhat.mean(axis=-1, keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (dxhat - mean_d - xhat * mean_dx)
        return (gx.reshape(n, c, h, w), ggamma, gbeta)

    return _node(out, (x, gamma, beta), vjp)


def avg_pool2(x) -> Var:
    x = lift(x)
    n, c, h, w = x.value.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.value.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        return (gx * 0.25,)

    return _node(out, (x,), vjp)


def upsample_nearest2(x) -> Var:
    x = lift(x)
    out = np.repeat(np.repeat(x.value, 2, axis=2), 2, axis=3)

    def vjp(g):
        n, c, h2, w2 = g.shape
        return (g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return _node(out, (x,), vjp)
