"""Differentiable primitives over :class:`~omnirestore.engine.tensor.Tensor`.

Every public op computes its forward result with numpy, then registers a
backward closure on the active tape via :func:`record`. Backward closures
capture plain ndarrays, never Tensors, so replay is insensitive to later
mutation of parameter objects.

Heavy ops (conv2d, depthwise_conv2d, matmul, linear) report forward-pass
multiply-accumulate counts to the active :class:`FlopCounter`. Elementwise
and data-movement ops report nothing.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .flops import count_macs
from .tensor import Tensor, record

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape of its source operand."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return record("add", (a, b), out, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return record("sub", (a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad * bd

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return record("mul", (a, b), out, backward)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s

    def backward(g):
        return (g * s,)

    return record("mul_scalar", (a,), out, backward)


def square(a: Tensor) -> Tensor:
    ad = a.data
    out = ad * ad

    def backward(g):
        return (2.0 * g * ad,)

    return record("square", (a,), out, backward)


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    out = np.abs(ad)

    def backward(g):
        return (g * np.sign(ad),)

    return record("absolute", (a,), out, backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return record("exp", (a,), out, backward)


def log(a: Tensor) -> Tensor:
    ad = a.data
    out = np.log(ad)

    def backward(g):
        return (g / ad,)

    return record("log", (a,), out, backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return record("tanh", (a,), out, backward)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return record("sigmoid", (a,), out, backward)


def relu(a: Tensor) -> Tensor:
    ad = a.data
    out = np.maximum(ad, 0.0)

    def backward(g):
        return (g * (ad > 0.0),)

    return record("relu", (a,), out, backward)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * dx,)

    return record("gelu", (a,), out, backward)


# ---------------------------------------------------------------------------
# reductions and shape movement
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = a.data
    out = ad.sum(axis=axis, keepdims=keepdims)
    axes = _normalize_axes(axis, ad.ndim)

    def backward(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, ad.shape).copy(),)

    return record("sum", (a,), out, backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = a.data
    out = ad.mean(axis=axis, keepdims=keepdims)
    axes = _normalize_axes(axis, ad.ndim)
    count = ad.size if axes is None else int(np.prod([ad.shape[i] for i in axes]))

    def backward(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, ad.shape).copy() / count,)

    return record("mean", (a,), out, backward)


def _normalize_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return record("reshape", (a,), out, backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return record("transpose", (a,), out, backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return record("concat", tensors, out, backward)


def slice_axis(a: Tensor, start: int, stop: int, axis: int) -> Tensor:
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = a.data[sl].copy()
    full = a.data.shape

    def backward(g):
        dx = np.zeros(full, dtype=g.dtype)
        dx[sl] = g
        return (dx,)

    return record("slice_axis", (a,), out, backward)


def chunk(a: Tensor, parts: int, axis: int) -> list:
    n = a.data.shape[axis]
    if n % parts != 0:
        raise ShapeError(f"cannot chunk axis of size {n} into {parts} equal parts")
    step = n // parts
    return [slice_axis(a, i * step, (i + 1) * step, axis) for i in range(parts)]


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    out = np.matmul(ad, bd)
    count_macs(out.size * ad.shape[-1])

    def backward(g):
        da = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        db = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return da, db

    return record("matmul", (a, b), out, backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: ``y = x @ w + b``."""
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear: input width {xd.shape[-1]} != weight rows {wd.shape[0]}")
    lead = xd.shape[:-1]
    xm = xd.reshape(-1, wd.shape[0])
    ym = xm @ wd
    if b is not None:
        ym = ym + b.data
    out = ym.reshape(*lead, wd.shape[1])
    count_macs(xm.shape[0] * wd.shape[0] * wd.shape[1])

    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        gm = g.reshape(-1, wd.shape[1])
        dx = (gm @ wd.T).reshape(xd.shape)
        dw = xm.T @ gm
        if b is None:
            return dx, dw
        return dx, dw, gm.sum(axis=0)

    return record("linear", inputs, out, backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW activations and OIHW kernels."""
    xd, wd = x.data, w.data
    if stride < 1:
        raise ShapeError(f"conv2d stride must be positive, got {stride}")
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D x and w, got {xd.shape}, {wd.shape}")
    n, c, h, wdt = xd.shape
    o, ci, kh, kw = wd.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {ci}")
    if h + 2 * padding < kh or wdt + 2 * padding < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _conv_windows(xp, kh, kw, stride)
    out = np.einsum("nchwij,ocij->nohw", win, wd, optimize=True)
    if b is not None:
        out = out + b.data[None, :, None, None]
    ho, wo = out.shape[2], out.shape[3]
    count_macs(n * o * c * kh * kw * ho * wo)

    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        dw = np.einsum("nchwij,nohw->ocij", win, g, optimize=True)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                part = np.tensordot(g, wd[:, :, i, j], axes=([1], [0]))
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    part.transpose(0, 3, 1, 2))
        dx = dxp[:, :, padding:padding + h, padding:padding + wdt]
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return record("conv2d", inputs, out, backward)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
                     padding: int = 0) -> Tensor:
    """Per-channel convolution; kernels shared [C,kh,kw] or per item [N,C,kh,kw]."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim not in (3, 4):
        raise ShapeError(f"depthwise_conv2d expects 4-D x, 3/4-D w, got {xd.shape}, {wd.shape}")
    n, c, h, wdt = xd.shape
    per_item = wd.ndim == 4
    if per_item and (wd.shape[0] != n or wd.shape[1] != c):
        raise ShapeError(f"per-item kernels {wd.shape} do not match input {xd.shape}")
    if not per_item and wd.shape[0] != c:
        raise ShapeError(f"shared kernels {wd.shape} do not match {c} channels")
    kh, kw = wd.shape[-2], wd.shape[-1]

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _conv_windows(xp, kh, kw, 1)
    if per_item:
        out = np.einsum("nchwij,ncij->nchw", win, wd, optimize=True)
    else:
        out = np.einsum("nchwij,cij->nchw", win, wd, optimize=True)
    if b is not None:
        bd = b.data
        out = out + (bd[:, :, None, None] if bd.ndim == 2 else bd[None, :, None, None])
    ho, wo = out.shape[2], out.shape[3]
    count_macs(n * c * kh * kw * ho * wo)

    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        if per_item:
            dw = np.einsum("nchwij,nchw->ncij", win, g, optimize=True)
        else:
            dw = np.einsum("nchwij,nchw->cij", win, g, optimize=True)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                k_ij = wd[..., i, j]
                k_ij = k_ij[:, :, None, None] if per_item else k_ij[None, :, None, None]
                dxp[:, :, i:i + ho, j:j + wo] += g * k_ij
        dx = dxp[:, :, padding:padding + h, padding:padding + wdt]
        if b is None:
            return dx, dw
        db = g.sum(axis=(2, 3)) if (b is not None and b.data.ndim == 2) else g.sum(axis=(0, 2, 3))
        return dx, dw, db

    return record("depthwise_conv2d", inputs, out, backward)


# ---------------------------------------------------------------------------
# normalization and attention support
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, axis: int = 1,
               eps: float = 1e-5) -> Tensor:
    """Normalize over one axis with biased variance, then scale and shift.

    ``gain`` and ``shift`` are 1-D of length ``x.shape[axis]``.
    """
    if eps <= 0.0:
        raise ShapeError(f"layer_norm eps must be positive, got {eps}")
    xd = x.data
    axis = axis % xd.ndim
    if gain.data.shape != (xd.shape[axis],) or shift.data.shape != (xd.shape[axis],):
        raise ShapeError(
            f"layer_norm affine params must be 1-D of length {xd.shape[axis]}, "
            f"got {gain.data.shape} and {shift.data.shape}")
    bshape = [1] * xd.ndim
    bshape[axis] = xd.shape[axis]
    gd = gain.data.reshape(bshape)
    sd = shift.data.reshape(bshape)

    mu = xd.mean(axis=axis, keepdims=True)
    var = xd.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gd + sd
    reduce_axes = tuple(i for i in range(xd.ndim) if i != axis)

    def backward(g):
        dgain = (g * xhat).sum(axis=reduce_axes)
        dshift = g.sum(axis=reduce_axes)
        dxhat = g * gd
        m1 = dxhat.mean(axis=axis, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axis, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dshift

    return record("layer_norm", (x, gain, shift), out, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return record("softmax", (x,), out, backward)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

_INTERP_CACHE: dict = {}


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense 1-D bilinear interpolation matrix, half-pixel centers."""
    key = (n_in, n_out)
    cached = _INTERP_CACHE.get(key)
    if cached is not None:
        return cached
    mat = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        i0 = int(np.floor(src))
        frac = src - i0
        i0c = min(max(i0, 0), n_in - 1)
        i1c = min(max(i0 + 1, 0), n_in - 1)
        mat[o, i0c] += 1.0 - frac
        mat[o, i1c] += frac
    _INTERP_CACHE[key] = mat
    return mat


def resize_bilinear(x: Tensor, scale: float) -> Tensor:
    """Bilinear resample of NCHW maps by a scale factor; scale 1 is exact identity."""
    if scale <= 0:
        raise ShapeError(f"resize_bilinear scale must be positive, got {scale}")
    h, w = x.data.shape[2], x.data.shape[3]
    return resize_bilinear_to(x, int(round(h * scale)), int(round(w * scale)))


def resize_bilinear_to(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resample of NCHW maps to an explicit size."""
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"resize_bilinear expects NCHW, got {xd.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target {out_h}x{out_w} must be positive")
    h, w = xd.shape[2], xd.shape[3]
    ah = _interp_matrix(h, out_h).astype(xd.dtype)
    aw = _interp_matrix(w, out_w).astype(xd.dtype)
    out = np.einsum("hH,ncHW,wW->nchw", ah, xd, aw, optimize=True)

    def backward(g):
        return (np.einsum("hH,nchw,wW->ncHW", ah, g, aw, optimize=True),)

    return record("resize_bilinear", (x,), out, backward)


def resize_area(x: Tensor, factor: int) -> Tensor:
    """Downsample NCHW by an integer factor, averaging each block."""
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"resize_area expects NCHW, got {xd.shape}")
    n, c, h, w = xd.shape
    if factor < 1 or h % factor or w % factor:
        raise ShapeError(f"resize_area factor {factor} does not divide {h}x{w}")
    if factor == 1:
        return reshape(x, xd.shape)
    ho, wo = h // factor, w // factor
    out = xd.reshape(n, c, ho, factor, wo, factor).mean(axis=(3, 5))
    area = factor * factor

    def backward(g):
        spread = np.broadcast_to(g[:, :, :, None, :, None],
                                 (n, c, ho, factor, wo, factor))
        return ((spread / area).reshape(n, c, h, w).copy(),)

    return record("resize_area", (x,), out, backward)


def adaptive_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean of NCHW maps, kept 4-D as [N, C, 1, 1]."""
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool expects NCHW, got {xd.shape}")
    n, c, h, w = xd.shape
    out = xd.mean(axis=(2, 3), keepdims=True)
    area = h * w

    def backward(g):
        return (np.broadcast_to(g / area, xd.shape).copy(),)

    return record("adaptive_avg_pool", (x,), out, backward)


# ---------------------------------------------------------------------------
# channel selection
# ---------------------------------------------------------------------------

def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis, sorted ascending.

    Ties resolve to the lower index. Plain ndarray in, plain ndarray out;
    selection is a hard decision and carries no gradient.
    """
    values = np.asarray(values)
    if not 1 <= k <= values.shape[-1]:
        raise ShapeError(f"topk k={k} out of range for axis of size {values.shape[-1]}")
    order = np.argsort(-values, axis=-1, kind="stable")
    return np.sort(order[..., :k], axis=-1)


def _expand_index(idx: np.ndarray, n: int, k: int, c: int) -> np.ndarray:
    idx = np.asarray(idx)
    if idx.ndim == 1:
        idx = np.broadcast_to(idx[None, :], (n, idx.shape[0]))
    if idx.shape != (n, k):
        raise ShapeError(f"channel index shape {idx.shape} != ({n}, {k})")
    if idx.size and (idx.min() < 0 or idx.max() >= c):
        raise ShapeError(f"channel index out of range for {c} channels")
    for row in idx:
        if len(np.unique(row)) != len(row):
            raise ShapeError("channel indices must be unique per item")
    return idx.astype(np.intp)


def gather_channels(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select channels per item: x [N,C,H,W], idx [N,k] or [k] -> [N,k,H,W]."""
    xd = x.data
    n = xd.shape[0]
    k = np.asarray(idx).shape[-1]
    idx = _expand_index(idx, n, k, xd.shape[1])
    sel = idx[:, :, None, None]
    out = np.take_along_axis(xd, sel, axis=1)

    def backward(g):
        dx = np.zeros_like(xd)
        np.put_along_axis(dx, sel, g, axis=1)
        return (dx,)

    return record("gather_channels", (x,), out, backward)


def scatter_channels(x: Tensor, y: Tensor, idx: np.ndarray) -> Tensor:
    """Copy of x with channels idx replaced by y; untouched channels keep
    their exact bit patterns."""
    xd, yd = x.data, y.data
    n = xd.shape[0]
    k = yd.shape[1]
    idx = _expand_index(idx, n, k, xd.shape[1])
    if yd.shape != (n, k) + xd.shape[2:]:
        raise ShapeError(f"scatter payload {yd.shape} incompatible with {xd.shape} at k={k}")
    sel = idx[:, :, None, None]
    out = xd.copy()
    np.put_along_axis(out, sel, yd, axis=1)

    def backward(g):
        dy = np.take_along_axis(g, sel, axis=1)
        dx = g.copy()
        np.put_along_axis(dx, sel, 0.0, axis=1)
        return dx, dy

    return record("scatter_channels", (x, y), out, backward)


def take_rows(w: Tensor, idx: np.ndarray) -> Tensor:
    """Gather leading-axis rows: w [C, ...], idx [N,k] -> [N,k, ...].

    Duplicate selections across items accumulate correctly on backward.
    """
    wd = w.data
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 2:
        raise ShapeError(f"take_rows index must be [N,k], got {idx.shape}")
    if idx.min() < 0 or idx.max() >= wd.shape[0]:
        raise ShapeError("take_rows index out of range")
    out = wd[idx]

    def backward(g):
        dw = np.zeros_like(wd)
        np.add.at(dw, idx.reshape(-1), g.reshape(-1, *wd.shape[1:]))
        return (dw,)

    return record("take_rows", (w,), out, backward)
