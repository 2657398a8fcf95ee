"""Differentiable primitives on :class:`~fbformer.tensor.Tensor`.

Image tensors are laid out as ``(batch, channels, height, width)``; token
tensors as ``(batch, tokens, channels)``.
"""
from __future__ import annotations

import builtins
import contextlib
import functools
import math
from typing import Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf

from .errors import ConfigError, ShapeError
from .tensor import Tensor

NORM_EPS = 1e-5

# Runtime multiply-accumulate tally, used to cross-check the symbolic profiler.
_mac_tally: Optional[dict] = None


@contextlib.contextmanager
def count_macs() -> Iterator[dict]:
    """Tally MACs of every conv/matmul executed inside the block."""
    global _mac_tally
    previous = _mac_tally
    _mac_tally = {"conv": 0, "matmul": 0}
    try:
        yield _mac_tally
    finally:
        _mac_tally = previous


def _tally(kind: str, macs: int) -> None:
    if _mac_tally is not None:
        _mac_tally[kind] += int(macs)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype.type if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def back(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * out, b.shape)

    return Tensor._from_op(out, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(x.dtype, copy=False)

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return Tensor._from_op(out, (a,), back)


# shape manipulation ---------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._from_op(out, (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    def back(g):
        full = np.zeros_like(a.data)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return Tensor._from_op(np.ascontiguousarray(a.data[index]), (a,), back)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return builtins.any(isinstance(i, (np.ndarray, list)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)
    return Tensor._from_op(out, (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data
    _tally("matmul", out.size * a.shape[-1])

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return Tensor._from_op(out, (a, b), back)


# softmax family -------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (a,), back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (a,), back)


def take_class(a: Tensor, index: np.ndarray, axis: int = 1) -> Tensor:
    """Select one entry along ``axis`` per position (``index`` drops that axis)."""
    idx = np.expand_dims(index, axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def back(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return Tensor._from_op(out, (a,), back)


# attention ------------------------------------------------------------------

def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, return_weights: bool = False):
    """Multi-head scaled dot-product attention on ``(batch, tokens, dim)`` inputs.

    Per head the output is ``softmax(q k^T / sqrt(dim / heads)) v``. Queries
    and keys may have different token counts.
    """
    dim = q.shape[-1]
    if heads < 1 or dim % heads:
        raise ConfigError(f"attention dim {dim} is not divisible by heads={heads}")
    if k.shape[-1] != dim or v.shape[-1] != dim or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shape mismatch q{q.shape} k{k.shape} v{v.shape}")
    head_dim = dim // heads
    batch, nq = q.shape[0], q.shape[1]
    nk = k.shape[1]

    def split(t, n):
        return transpose(reshape(t, (batch, n, heads, head_dim)), (0, 2, 1, 3))

    qh, kh, vh = split(q, nq), split(k, nk), split(v, nk)
    scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    weights = softmax(scores, axis=-1)
    out = transpose(matmul(weights, vh), (0, 2, 1, 3))
    out = reshape(out, (batch, nq, dim))
    return (out, weights) if return_weights else out


# normalization --------------------------------------------------------------

def layer_norm(x: Tensor, weight: Optional[Tensor], bias: Optional[Tensor], eps: float = NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the optional affine."""
    return _normalize(x, x.ndim - 1, weight, bias, eps)


def group_norm(x: Tensor, groups: int, weight: Optional[Tensor], bias: Optional[Tensor],
               eps: float = NORM_EPS) -> Tensor:
    """Group normalization of an NCHW tensor over (C/groups, H, W)."""
    n, c = x.shape[:2]
    if groups < 1 or c % groups or c == 0:
        raise ConfigError(f"group norm needs channels ({c}) divisible by groups ({groups})")
    grouped = reshape(x, (n, groups, -1))
    normed = reshape(_normalize(grouped, 2, None, None, eps), x.shape)
    shape = (1, c) + (1,) * (x.ndim - 2)
    if weight is not None:
        normed = mul(normed, reshape(weight, shape))
    if bias is not None:
        normed = add(normed, reshape(bias, shape))
    return normed


def normalize(x: Tensor, kind: str, weight=None, bias=None, groups: int = 1, eps: float = NORM_EPS) -> Tensor:
    if kind == "layer":
        return layer_norm(x, weight, bias, eps)
    if kind == "group":
        return group_norm(x, groups, weight, bias, eps)
    raise ConfigError(f"unknown normalization kind {kind!r}; expected 'layer' or 'group'")


def _normalize(x: Tensor, axis: int, weight, bias, eps: float) -> Tensor:
    if x.shape[axis] == 0:
        raise ConfigError("cannot normalize an empty group")
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    count = x.shape[axis]

    def back(g):
        return ((inv / count) * (count * g - g.sum(axis=axis, keepdims=True)
                                 - xhat * (g * xhat).sum(axis=axis, keepdims=True)),)

    out = Tensor._from_op(xhat.astype(x.dtype, copy=False), (x,), back)
    if weight is not None:
        out = mul(out, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# convolution ----------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv(x_shape, w_shape, stride, padding, groups):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIkk weight, got {x_shape} and {w_shape}")
    cin, cout, k = x_shape[1], w_shape[0], w_shape[2]
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigError(f"conv2d: in_channels={cin} and out_channels={cout} must be divisible by groups={groups}")
    if w_shape[1] != cin // groups:
        raise ShapeError(f"conv2d: weight expects {w_shape[1]} channels per group, input gives {cin // groups} "
                         f"(in_channels={cin}, groups={groups})")
    if w_shape[3] != k:
        raise ShapeError(f"conv2d: only square kernels are supported, got {w_shape[2]}x{w_shape[3]}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: invalid stride={stride} / padding={padding}")
    h, w = x_shape[2], x_shape[3]
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, :, padding:padding + h, padding:padding + w] = x
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation via an im2col matrix product (the fast path)."""
    _check_conv(x.shape, weight.shape, stride, padding, groups)
    n, cin, h, w = x.shape
    cout, cg, k, _ = weight.shape
    og = cout // groups
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    _tally("conv", cout * cg * k * k * ho * wo * n)

    if k == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        cols = xs.reshape(n, groups, cg, ho * wo)
        wmat = weight.data.reshape(groups, og, cg)
        out = np.matmul(wmat, cols).reshape(n, cout, ho, wo)

        def back(g):
            gg = g.reshape(n, groups, og, ho * wo)
            gw = np.matmul(gg, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(weight.shape)
            gx = None
            if x.requires_grad:
                gcols = np.matmul(np.swapaxes(wmat, -1, -2), gg).reshape(n, cin, ho, wo)
                if stride > 1:
                    gx = np.zeros_like(x.data)
                    gx[:, :, ::stride, ::stride] = gcols
                else:
                    gx = gcols
            return gx, gw, g.sum(axis=(0, 2, 3)) if bias is not None else None
    else:
        xp = _pad(x.data, padding)
        s0, s1, s2, s3 = xp.strides
        win = as_strided(xp, (n, groups, cg, ho, wo, k, k),
                         (s0, cg * s1, s1, stride * s2, stride * s3, s2, s3), writeable=False)
        # (n, G, ho, wo, cg, k, k) -> (n, G, ho*wo, cg*k*k)
        cols = win.transpose(0, 1, 3, 4, 2, 5, 6)
        cols = np.ascontiguousarray(cols).reshape(n, groups, ho * wo, cg * k * k)
        wmat = weight.data.reshape(groups, og, cg * k * k).transpose(0, 2, 1)
        out = np.matmul(cols, wmat)  # (n, G, ho*wo, og)
        out = np.ascontiguousarray(out.transpose(0, 1, 3, 2)).reshape(n, cout, ho, wo)

        def back(g):
            gg = g.reshape(n, groups, og, ho * wo).transpose(0, 1, 3, 2)  # (n, G, ho*wo, og)
            gw = np.matmul(np.swapaxes(cols, -1, -2), gg).sum(axis=0)  # (G, cg*k*k, og)
            gw = np.ascontiguousarray(gw.transpose(0, 2, 1)).reshape(weight.shape)
            gx = None
            if x.requires_grad:
                gcols = np.matmul(gg, np.swapaxes(wmat, -1, -2))  # (n, G, ho*wo, cg*k*k)
                gcols = gcols.reshape(n, groups, ho, wo, cg, k, k).transpose(0, 1, 4, 5, 6, 2, 3)
                gcols = gcols.reshape(n, cin, k, k, ho, wo)
                gxp = np.zeros_like(xp)
                for di in range(k):
                    for dj in range(k):
                        gxp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += gcols[:, :, di, dj]
                gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            return gx, gw, g.sum(axis=(0, 2, 3)) if bias is not None else None

    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    parents = (x, weight) + ((bias,) if bias is not None else ())
    return Tensor._from_op(out.astype(x.dtype, copy=False), parents, back)


def conv2d_direct(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None, stride: int = 1,
                  padding: int = 0, groups: int = 1) -> np.ndarray:
    """Reference convolution by accumulating shifted input slices per kernel tap.

    Forward only; kept as an in-repo oracle for :func:`conv2d`.
    """
    _check_conv(x.shape, weight.shape, stride, padding, groups)
    n, cin, h, w = x.shape
    cout, cg, k, _ = weight.shape
    og = cout // groups
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, cout, ho, wo), dtype=np.result_type(x, weight))
    for grp in range(groups):
        for o in range(grp * og, (grp + 1) * og):
            for c in range(cg):
                src = xp[:, grp * cg + c]
                for di in range(k):
                    for dj in range(k):
                        out[:, o] += weight[o, c, di, dj] * src[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
    if bias is not None:
        out += bias.reshape(1, cout, 1, 1)
    return out


# resampling -----------------------------------------------------------------

@functools.lru_cache(maxsize=256)
def bilinear_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Row-stochastic interpolation matrix for half-pixel-centre bilinear resize.

    Output sample ``i`` reads source coordinate ``(i + 0.5) * in/out - 0.5``
    clamped at 0; it blends floor and floor+1 (the latter clamped to the last
    index). No corner alignment, no antialiasing.
    """
    if in_size < 1 or out_size < 1:
        raise ShapeError(f"resize sizes must be >= 1, got {in_size} -> {out_size}")
    m = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for i in range(out_size):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        lo = min(int(math.floor(src)), in_size - 1)
        hi = min(lo + 1, in_size - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    m.flags.writeable = False
    return m


@functools.lru_cache(maxsize=256)
def _bilinear_cast(in_size: int, out_size: int, dtype) -> np.ndarray:
    m = bilinear_matrix(in_size, out_size).astype(dtype)
    m.flags.writeable = False
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be at least 1x1, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    mh = _bilinear_cast(h, out_h, x.dtype.type)
    mw = _bilinear_cast(w, out_w, x.dtype.type)
    out = mh @ x.data @ mw.T

    def back(g):
        return (mh.T @ g @ mw,)

    return Tensor._from_op(out, (x,), back)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def back(g):
        *lead, h, w = g.shape
        return (g.reshape(*lead, h // factor, factor, w // factor, factor).sum(axis=(-3, -1)),)

    return Tensor._from_op(out, (x,), back)


def avg_pool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping ``factor`` x ``factor`` average pooling."""
    *lead, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"avg_pool factor {factor} does not divide {h}x{w}")
    out = x.data.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1))

    def back(g):
        return (g.repeat(factor, axis=-2).repeat(factor, axis=-1) / (factor * factor),)

    return Tensor._from_op(out, (x,), back)
