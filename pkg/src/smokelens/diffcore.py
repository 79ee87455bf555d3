"""Minimal reverse-mode differentiation over numpy arrays.

Every operation builds a DiffValue node holding its result and a closure that
routes the incoming adjoint to its parents. backward() walks the reachable
nodes in reverse creation order (a topological order, since parents are
always created first), so gradient accumulation is deterministic and two
passes over the same record are bit-identical.

Elementwise binary ops follow numpy broadcasting; the backward pass sums the
adjoint down to each parent's shape. The primitive set is intentionally
small: arithmetic, exp/log/abs/sigmoid, axis reductions, concat/reshape,
zero-fill translation, windowed min/max, nearest upsampling, strided 2-D
convolution, and constant-mask application (dropout).
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (values still computed)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class DiffValue:
    """An array (or scalar) paired with its accumulated gradient."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[DiffValue, ...] = ()
        self._backward = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"DiffValue(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def _lift(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else DiffValue(x)


def _node(value, parents, backward_fn) -> DiffValue:
    out = DiffValue(value)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum an adjoint down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _accumulate(node: DiffValue, g: np.ndarray) -> None:
    # Lazy allocation; grads are only ever rebound, never mutated in place,
    # so storing the first contribution without a copy is safe.
    node.grad = g if node.grad is None else node.grad + g


def grad_of(node: DiffValue) -> np.ndarray:
    """The accumulated gradient, materializing zeros for untouched nodes."""
    return node.grad if node.grad is not None else np.zeros_like(node.value)


def backward(root: DiffValue) -> None:
    """Populate .grad for every node reachable from a scalar root.

    Grads are reset at the start of each call, so repeated calls on the same
    record produce identical results. grad(root) == 1 afterwards.
    """
    if root.value.ndim != 0:
        raise ValueError(f"backward root must be scalar, got shape {root.value.shape}")

    # Iterative DFS; reachable set only.
    nodes = []
    seen = set()
    stack = [root]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        nodes.append(n)
        stack.extend(n._parents)

    for n in nodes:
        n.grad = None
    root.grad = np.ones_like(root.value)

    # Reverse creation order is a topological order of the record.
    for n in sorted(nodes, key=lambda v: v._id, reverse=True):
        if n._backward is not None and n.grad is not None:
            n._backward(n.grad)


# -- arithmetic ----------------------------------------------------------


def add(a, b) -> DiffValue:
    a, b = _lift(a), _lift(b)
    out_val = a.value + b.value

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.value.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.value.shape))

    return _node(out_val, (a, b), back)


def sub(a, b) -> DiffValue:
    a, b = _lift(a), _lift(b)
    out_val = a.value - b.value

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.value.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.value.shape))

    return _node(out_val, (a, b), back)


def mul(a, b) -> DiffValue:
    a, b = _lift(a), _lift(b)
    out_val = a.value * b.value

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.value, b.value.shape))

    return _node(out_val, (a, b), back)


def div(a, b) -> DiffValue:
    a, b = _lift(a), _lift(b)
    out_val = a.value / b.value

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.value, a.value.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    return _node(out_val, (a, b), back)


# -- elementwise nonlinearities -------------------------------------------


def exp(a) -> DiffValue:
    a = _lift(a)
    out_val = np.exp(a.value)

    def back(g):
        _accumulate(a, g * out_val)

    return _node(out_val, (a,), back)


def log(a) -> DiffValue:
    a = _lift(a)
    out_val = np.log(a.value)

    def back(g):
        _accumulate(a, g / a.value)

    return _node(out_val, (a,), back)


def absolute(a) -> DiffValue:
    """|a| with subgradient 0 at 0."""
    a = _lift(a)
    out_val = np.abs(a.value)

    def back(g):
        _accumulate(a, g * np.sign(a.value))

    return _node(out_val, (a,), back)


def sigmoid(a) -> DiffValue:
    a = _lift(a)
    x = a.value
    out_val = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def back(g):
        _accumulate(a, g * out_val * (1.0 - out_val))

    return _node(out_val, (a,), back)


# -- reductions and shape ops ----------------------------------------------


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def dsum(a, axis=None, keepdims: bool = False) -> DiffValue:
    a = _lift(a)
    out_val = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        _accumulate(a, _expand_reduced(g, a.value.shape, axis, keepdims))

    return _node(out_val, (a,), back)


def dmean(a, axis=None, keepdims: bool = False) -> DiffValue:
    a = _lift(a)
    out_val = a.value.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.value.shape[ax % a.value.ndim] for ax in axes]))

    def back(g):
        _accumulate(a, _expand_reduced(g, a.value.shape, axis, keepdims) / count)

    return _node(out_val, (a,), back)


def concat(parts, axis: int = 0) -> DiffValue:
    parts = [_lift(p) for p in parts]
    out_val = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(p, g[tuple(idx)])

    return _node(out_val, tuple(parts), back)


def reshape(a, shape) -> DiffValue:
    a = _lift(a)
    out_val = a.value.reshape(shape)

    def back(g):
        _accumulate(a, g.reshape(a.value.shape))

    return _node(out_val, (a,), back)


# -- spatial ops ------------------------------------------------------------


def _shift_slices(n: int, d: int):
    if d >= 0:
        return slice(0, n - d), slice(d, n)
    return slice(-d, n), slice(0, n + d)


def translate(a, dy: int, dx: int) -> DiffValue:
    """out[i, j] = a[i + dy, j + dx], zero outside the image. 2-D only."""
    a = _lift(a)
    if a.value.ndim != 2:
        raise ValueError("translate expects a 2-D map")
    h, w = a.value.shape
    if abs(dy) >= h or abs(dx) >= w:
        out_val = np.zeros_like(a.value)

        def back_empty(g):
            _accumulate(a, np.zeros_like(a.value))

        return _node(out_val, (a,), back_empty)

    dst_r, src_r = _shift_slices(h, dy)
    dst_c, src_c = _shift_slices(w, dx)
    out_val = np.zeros_like(a.value)
    out_val[dst_r, dst_c] = a.value[src_r, src_c]

    def back(g):
        ga = np.zeros_like(a.value)
        ga[src_r, src_c] = g[dst_r, dst_c]
        _accumulate(a, ga)

    return _node(out_val, (a,), back)


def _window_extreme(a, k: int, take_max: bool) -> DiffValue:
    a = _lift(a)
    if a.value.ndim != 2:
        raise ValueError("window min/max expects a 2-D map")
    if k < 1 or k % 2 == 0:
        raise ValueError(f"window size must be odd and positive, got {k}")
    h, w = a.value.shape
    x = a.value
    pad = k // 2
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    best = None
    best_src = None
    # Row-major window order; strict comparison keeps the first index on ties.
    for di in range(k):
        src_i = np.clip(rows + (di - pad), 0, h - 1)
        for dj in range(k):
            src_j = np.clip(cols + (dj - pad), 0, w - 1)
            cand = x[src_i, src_j]
            flat = src_i * w + src_j
            if best is None:
                best = cand.copy()
                best_src = np.broadcast_to(flat, (h, w)).copy()
            else:
                better = cand > best if take_max else cand < best
                np.copyto(best, cand, where=better)
                np.copyto(best_src, np.broadcast_to(flat, (h, w)), where=better)

    src_idx = best_src

    def back(g):
        ga = np.zeros(h * w)
        np.add.at(ga, src_idx.ravel(), g.ravel())
        _accumulate(a, ga.reshape(h, w))

    return _node(best, (a,), back)


def window_min(a, k: int) -> DiffValue:
    """Windowed min with clamp-to-edge borders; gradient to the argmin."""
    return _window_extreme(a, k, take_max=False)


def window_max(a, k: int) -> DiffValue:
    """Windowed max with clamp-to-edge borders; gradient to the argmax."""
    return _window_extreme(a, k, take_max=True)


def upsample_nearest(a, factor: int = 2) -> DiffValue:
    """Nearest-neighbor upsampling of the last two axes."""
    a = _lift(a)
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    out_val = np.repeat(np.repeat(a.value, factor, axis=-2), factor, axis=-1)

    def back(g):
        lead = g.shape[:-2]
        h, w = a.value.shape[-2:]
        gr = g.reshape(lead + (h, factor, w, factor))
        _accumulate(a, gr.sum(axis=(-3, -1)))

    return _node(out_val, (a,), back)


def apply_mask(a, mask: np.ndarray) -> DiffValue:
    """Multiply by a constant mask (dropout application); no gradient to mask."""
    a = _lift(a)
    m = np.asarray(mask, dtype=np.float64)
    out_val = a.value * m

    def back(g):
        _accumulate(a, _unbroadcast(g * m, a.value.shape))

    return _node(out_val, (a,), back)


def conv2d(x, w, stride: int = 1, padding: int | None = None) -> DiffValue:
    """Strided 2-D convolution (cross-correlation) of an (N, C, H, W) batch.

    w has shape (Cout, Cin, kh, kw); padding defaults to kh//2 ('same' for
    stride 1 and odd kernels). Bias, when wanted, is a separate broadcast add.
    """
    x, w = _lift(x), _lift(w)
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ValueError("conv2d expects x:(N,C,H,W) and w:(Cout,Cin,kh,kw)")
    n, c, h, wd = x.value.shape
    cout, cin, kh, kw = w.value.shape
    if cin != c:
        raise ValueError(f"channel mismatch: input {c}, kernel {cin}")
    if padding is None:
        padding = kh // 2
    s = int(stride)
    if s < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")

    p = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // s + 1
    wo = (wd + 2 * padding - kw) // s + 1
    win = sliding_window_view(p, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = w.value.reshape(cout, c * kh * kw)
    out_val = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def back(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        if w.requires_grad:
            _accumulate(w, (g2.T @ cols).reshape(w.value.shape))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            dp = np.zeros_like(p)
            for i in range(kh):
                for j in range(kw):
                    dp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                dp = dp[:, :, padding:-padding, padding:-padding]
            _accumulate(x, dp)

    return _node(out_val, (x, w), back)


# -- composed helpers --------------------------------------------------------


def relu(a) -> DiffValue:
    a = _lift(a)
    return mul(add(a, absolute(a)), 0.5)


def leaky_relu(a, slope: float = 0.1) -> DiffValue:
    a = _lift(a)
    return add(mul(a, slope), mul(relu(a), 1.0 - slope))


def softplus(a) -> DiffValue:
    """log(1 + e^a), computed as relu(a) + log(1 + e^-|a|) to avoid overflow."""
    a = _lift(a)
    na = absolute(a)
    return add(mul(add(a, na), 0.5), log(add(exp(mul(na, -1.0)), 1.0)))
