"""Differentiable primitives.

Every function accepts ``Var`` or array-likes and returns a ``Var``. Arrays are
float64 and row-major throughout; reductions run in a fixed order so seeded
runs reproduce byte for byte.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import DTYPE, Var, as_var, make


class DimensionError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.value.shape, b.value.shape
    return make(a.value + b.value, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.value.shape, b.value.shape
    return make(a.value - b.value, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return make(av * bv, (a, b),
                lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def sigmoid(x) -> Var:
    """Logistic function, stable for large |x| (no overflow up to |x| ~ 700 and beyond)."""
    x = as_var(x)
    v = x.value
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make(s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x) -> Var:
    x = as_var(x)
    mask = x.value > 0
    return make(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def absolute(x) -> Var:
    x = as_var(x)
    sign = np.sign(x.value)
    return make(np.abs(x.value), (x,), lambda g: (g * sign,))


# ----------------------------------------------------------------- reductions

def sum_(x, axis=None, keepdims: bool = False) -> Var:
    x = as_var(x)
    shape = x.value.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Var:
    x = as_var(x)
    if axis is None:
        count = x.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.value.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def global_avg_pool(x) -> Var:
    """Per-channel mean over the (l, h, w) axes of a ``[..., l, h, w, c]`` tensor."""
    x = as_var(x)
    if x.value.ndim < 4:
        raise DimensionError(f"global_avg_pool expects [..., l, h, w, c], got {x.value.shape}")
    return mean(x, axis=(-4, -3, -2))


def softmax(x) -> Var:
    """Softmax over the last axis (max-shifted)."""
    x = as_var(x)
    z = x.value - np.max(x.value, axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=-1, keepdims=True)
    return make(s, (x,), lambda g: (s * (g - np.sum(g * s, axis=-1, keepdims=True)),))


def log_softmax(x) -> Var:
    x = as_var(x)
    z = x.value - np.max(x.value, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return make(out, (x,), lambda g: (g - s * np.sum(g, axis=-1, keepdims=True),))


# --------------------------------------------------------------- shape/index

def reshape(x, shape: Sequence[int]) -> Var:
    x = as_var(x)
    old = x.value.shape
    return make(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def broadcast_to(x, shape: Sequence[int]) -> Var:
    x = as_var(x)
    old = x.value.shape
    return make(np.broadcast_to(x.value, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),))


def concat(xs: Sequence, axis: int = -1) -> Var:
    xs = [as_var(x) for x in xs]
    sizes = [x.value.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return make(np.concatenate([x.value for x in xs], axis=axis), xs,
                lambda g: tuple(np.split(g, splits, axis=axis)))


def take(x, indices, axis: int = -1) -> Var:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    x = as_var(x)
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.value.shape
    ax = axis % x.value.ndim

    def back(g):
        out = np.zeros(shape, dtype=DTYPE)
        gm = np.moveaxis(g, ax, 0)
        om = np.moveaxis(out, ax, 0)
        np.add.at(om, idx, gm)
        return (out,)

    return make(np.take(x.value, idx, axis=ax), (x,), back)


def pick(x, labels) -> Var:
    """Select ``x[..., labels[...]]`` along the last axis (one value per position)."""
    x = as_var(x)
    lab = np.asarray(labels, dtype=np.intp)
    if lab.shape != x.value.shape[:-1]:
        raise DimensionError(f"labels {lab.shape} do not match {x.value.shape[:-1]}")
    picked = np.take_along_axis(x.value, lab[..., None], axis=-1)[..., 0]
    shape = x.value.shape

    def back(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(out, lab[..., None], g[..., None], axis=-1)
        return (out,)

    return make(picked, (x,), back)


def upsample2x(x) -> Var:
    """Nearest-neighbour x2 upsampling of a ``[..., h, w, c]`` tensor."""
    x = as_var(x)
    v = x.value
    out = np.repeat(np.repeat(v, 2, axis=-3), 2, axis=-2)

    def back(g):
        *lead, h2, w2, c = g.shape
        g = g.reshape(*lead, h2 // 2, 2, w2 // 2, 2, c)
        return (g.sum(axis=(-4, -2)),)

    return make(out, (x,), back)


# ---------------------------------------------------------------- linear ops

def affine(x, weight, bias) -> Var:
    """``out[..., j] = sum_i x[..., i] * weight[i, j] + bias[j]``."""
    x, weight, bias = as_var(x), as_var(weight), as_var(bias)
    xv, wv = x.value, weight.value
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[0] or bias.value.shape != (wv.shape[1],):
        raise DimensionError(
            f"affine: input {xv.shape}, weight {wv.shape}, bias {bias.value.shape}")
    out = xv @ wv + bias.value

    def back(g):
        x2 = xv.reshape(-1, xv.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        return g @ wv.T, x2.T @ g2, g2.sum(axis=0)

    return make(out, (x, weight, bias), back)


def _conv_geometry(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        if size < k:
            raise DimensionError(f"valid convolution needs input >= kernel ({size} < {k})")
        return (size - k) // stride + 1, 0, 0
    raise ValueError(f"unknown padding {padding!r}")


def conv2d(x, kernel, bias, stride: int = 1, padding: str = "same") -> Var:
    """2-D convolution (cross-correlation) of ``[..., h, w, c_in]`` with ``[kh, kw, c_in, c_out]``.

    "same" padding zero-fills so the output is ``ceil(input / stride)``; any odd
    leftover padding goes to the bottom/right edge.
    """
    x, kernel, bias = as_var(x), as_var(kernel), as_var(bias)
    xv, kv = x.value, kernel.value
    if xv.ndim < 3 or kv.ndim != 4:
        raise DimensionError(f"conv2d: input {xv.shape}, kernel {kv.shape}")
    kh, kw, kc, cout = kv.shape
    *lead, h, w, cin = xv.shape
    if cin != kc:
        raise DimensionError(f"conv2d: input has {cin} channels, kernel expects {kc}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be odd-sized, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if bias.value.shape != (cout,):
        raise DimensionError(f"conv2d: bias {bias.value.shape} vs c_out {cout}")

    oh, pt, pb = _conv_geometry(h, kh, stride, padding)
    ow, pl, pr = _conv_geometry(w, kw, stride, padding)
    x4 = xv.reshape(-1, h, w, cin)
    n = x4.shape[0]
    xp = np.pad(x4, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    # columns ordered (i, j, c) to match the row-major kernel reshape
    cols = np.concatenate(
        [xp[:, i:i + hs:stride, j:j + ws:stride, :] for i in range(kh) for j in range(kw)],
        axis=-1,
    ).reshape(n * oh * ow, kh * kw * cin)
    k2 = kv.reshape(kh * kw * cin, cout)
    out = (cols @ k2 + bias.value).reshape(*lead, oh, ow, cout)

    def back(g):
        g2 = g.reshape(n * oh * ow, cout)
        gk = (cols.T @ g2).reshape(kv.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ k2.T).reshape(n, oh, ow, kh * kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + hs:stride, j:j + ws:stride, :] += gcols[:, :, :, i * kw + j, :]
        gx = gxp[:, pt:pt + h, pl:pl + w, :].reshape(xv.shape)
        return gx, gk, gb

    return make(out, (x, kernel, bias), back)
