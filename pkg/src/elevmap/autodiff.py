"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only the operations the elevation model actually uses are provided:
elementwise arithmetic, matmul, shaping, softmax, SiLU, smooth-L1,
absolute value, reductions, 2D convolution, bilinear upsampling and
adaptive average pooling. Every operation here is checked against
central finite differences in the test suite.

Gradients accumulate in ``Tensor.grad``. Wrap inference in
:func:`no_grad` to skip tape construction.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "concat",
    "matmul",
    "softmax",
    "silu",
    "layer_norm",
    "smooth_l1",
    "conv2d",
    "bilinear_upsample2d",
    "adaptive_avg_pool2d",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # -- graph construction --

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    # -- arithmetic --

    def __add__(self, other):
        other = as_tensor(other)
        out_data = self.data + other.data
        def back(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape))
        return Tensor._make(out_data, (self, other), back)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out_data = self.data * other.data
        def back(g):
            return (
                _unbroadcast(g * other.data, self.shape),
                _unbroadcast(g * self.data, other.shape),
            )
        return Tensor._make(out_data, (self, other), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a constant")
        return self * (1.0 / float(other))

    def __getitem__(self, idx):
        out_data = self.data[idx]
        def back(g):
            dx = np.zeros_like(self.data)
            dx[idx] += g
            return (dx,)
        return Tensor._make(out_data, (self,), back)

    # -- shaping --

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(old),)
        )

    def transpose(self, axes):
        inv = np.argsort(axes)
        return Tensor._make(
            np.transpose(self.data, axes), (self,), lambda g: (np.transpose(g, inv),)
        )

    @property
    def T(self):
        return self.transpose((1, 0))

    # -- reductions --

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape
        def back(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        return Tensor._make(out_data, (self,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def abs(self):
        sign = np.sign(self.data)
        return Tensor._make(np.abs(self.data), (self,), lambda g: (g * sign,))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    def back(g):
        return tuple(np.split(g, splits, axis=axis))
    return Tensor._make(out_data, tuple(tensors), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data
    def back(g):
        return (g @ b.data.T, a.data.T @ g)
    return Tensor._make(out_data, (a, b), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)
    return Tensor._make(y, (x,), back)


def silu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out_data = x.data * sig
    def back(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)
    return Tensor._make(out_data, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out_data = y * gamma.data + beta.data

    def back(g):
        dgamma = (g * y).sum(axis=tuple(range(g.ndim - 1)))
        dbeta = g.sum(axis=tuple(range(g.ndim - 1)))
        gy = g * gamma.data
        dx = inv * (
            gy - gy.mean(axis=-1, keepdims=True) - y * (gy * y).mean(axis=-1, keepdims=True)
        )
        return (dx, dgamma, dbeta)

    return Tensor._make(out_data, (x, gamma, beta), back)


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1: quadratic below beta, linear above."""
    x = as_tensor(x)
    ax = np.abs(x.data)
    quad = ax < beta
    out_data = np.where(quad, 0.5 * x.data * x.data / beta, ax - 0.5 * beta)
    dgrad = np.where(quad, x.data / beta, np.sign(x.data))
    def back(g):
        return (g * dgrad,)
    return Tensor._make(out_data, (x,), back)


# --- structured 2D ops ------------------------------------------------------

_conv_index_cache: dict = {}


def _conv_indices(c_in, hp, wp, kh, kw, stride, ho, wo):
    key = (c_in, hp, wp, kh, kw, stride, ho, wo)
    hit = _conv_index_cache.get(key)
    if hit is not None:
        return hit
    c = np.repeat(np.arange(c_in), kh * kw)
    di = np.tile(np.repeat(np.arange(kh), kw), c_in)
    dj = np.tile(np.arange(kw), c_in * kh)
    base = c * (hp * wp) + di * wp + dj  # (c_in*kh*kw,)
    i0 = np.arange(ho) * stride
    j0 = np.arange(wo) * stride
    off = (i0[:, None] * wp + j0[None, :]).ravel()  # (ho*wo,)
    idx = (off[:, None] + base[None, :]).ravel()
    _conv_index_cache[key] = idx
    return idx


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D convolution, x: (n, c, h, w), w: (o, c, kh, kw), b: (o,) or None."""
    x, w = as_tensor(x), as_tensor(w)
    n, c_in, h, wdt = x.shape
    c_out, c_in_w, kh, kw = w.shape
    if c_in != c_in_w:
        raise ValueError(f"conv2d channel mismatch: input {c_in}, weight {c_in_w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, c, ho, wo, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho * wo, c_in * kh * kw)

    w2 = w.data.reshape(c_out, -1)
    out = cols @ w2.T  # (n, ho*wo, c_out)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
    out_data = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(n, c_out, ho, wo)

    def back(g):
        g2 = g.reshape(n, c_out, ho * wo).transpose(0, 2, 1)  # (n, ho*wo, c_out)
        dw = np.einsum("nlo,nlk->ok", g2, cols).reshape(w.shape)
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        dcols = g2 @ w2  # (n, ho*wo, c_in*kh*kw)
        idx = _conv_indices(c_in, hp, wp, kh, kw, stride, ho, wo)
        flat = c_in * hp * wp
        dxp = np.empty((n, flat))
        for i in range(n):
            dxp[i] = np.bincount(idx, weights=dcols[i].ravel(), minlength=flat)
        dxp = dxp.reshape(n, c_in, hp, wp)
        dx = dxp[:, :, pad : hp - pad, pad : wp - pad] if pad else dxp
        if b is not None:
            return (dx, dw, db)
        return (dx, dw)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out_data, parents, back)


def _upsample_axis(n_in: int, factor: int):
    src = (np.arange(n_in * factor) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_upsample2d(x: Tensor, factor: int) -> Tensor:
    """Upsample (c, h, w) by an integer factor with half-pixel-aligned bilinear weights."""
    x = as_tensor(x)
    c, h, w = x.shape
    r0, r1, fr = _upsample_axis(h, factor)
    c0, c1, fc = _upsample_axis(w, factor)
    wr0, wr1 = (1 - fr)[:, None], fr[:, None]
    wc0, wc1 = (1 - fc)[None, :], fc[None, :]
    d = x.data
    out_data = (
        d[:, r0[:, None], c0[None, :]] * (wr0 * wc0)
        + d[:, r0[:, None], c1[None, :]] * (wr0 * wc1)
        + d[:, r1[:, None], c0[None, :]] * (wr1 * wc0)
        + d[:, r1[:, None], c1[None, :]] * (wr1 * wc1)
    )

    def back(g):
        dx = np.zeros((c, h * w))
        chan = np.arange(c)[:, None, None] * (h * w)
        flat_n = c * h * w
        for ri, wr in ((r0, wr0), (r1, wr1)):
            for ci, wc in ((c0, wc0), (c1, wc1)):
                idx = (chan + ri[None, :, None] * w + ci[None, None, :]).ravel()
                contrib = (g * (wr * wc)[None]).ravel()
                dx = dx + np.bincount(idx, weights=contrib, minlength=flat_n).reshape(c, h * w)
        return (dx.reshape(c, h, w),)

    return Tensor._make(out_data, (x,), back)


def adaptive_avg_pool2d(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Average-pool (c, h, w) onto an (oh, ow) grid with integer block boundaries."""
    x = as_tensor(x)
    c, h, w = x.shape
    oh, ow = out_hw
    rb = [(math.floor(i * h / oh), math.ceil((i + 1) * h / oh)) for i in range(oh)]
    cb = [(math.floor(j * w / ow), math.ceil((j + 1) * w / ow)) for j in range(ow)]
    out_data = np.empty((c, oh, ow))
    for i, (rs, re) in enumerate(rb):
        for j, (cs, ce) in enumerate(cb):
            out_data[:, i, j] = x.data[:, rs:re, cs:ce].mean(axis=(1, 2))

    def back(g):
        dx = np.zeros((c, h, w))
        for i, (rs, re) in enumerate(rb):
            for j, (cs, ce) in enumerate(cb):
                dx[:, rs:re, cs:ce] += g[:, i, j, None, None] / ((re - rs) * (ce - cs))
        return (dx,)

    return Tensor._make(out_data, (x,), back)
