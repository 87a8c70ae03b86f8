"""Forward/backward kernels for every layer the codec architectures use.

All kernels work on raw numpy arrays in (n, c, h, w) layout. Each forward
returns (output, ctx); the matching backward consumes ctx and the upstream
gradient. Convolution kernels optionally report their multiply-accumulate
counts through the module-level MAC counter so the complexity analyzer can
be cross-checked against actual execution.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from csilab.tensor import ShapeError

class MacCounter:
    """Tally of multiply-accumulate operations performed by conv kernels."""

    def __init__(self):
        self.enabled = False
        self.total = 0
        self.per_call: list[tuple[str, int]] = []

    def reset(self):
        self.total = 0
        self.per_call = []

    def add(self, kind: str, macs: int):
        if self.enabled:
            self.total += macs
            self.per_call.append((kind, macs))


mac_counter = MacCounter()


def same_pad(size: int, k: int, s: int) -> tuple[int, int, int]:
    """Return (out_size, pad_before, pad_after) for 'same' padding."""
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    before = total // 2
    return out, before, total - before


# ---------------------------------------------------------------------------
# convolution


def _pad_input_cfirst(x, k, s):
    """Pad and transpose to channel-first (c, n, hp, wp); contiguous for tap GEMMs."""
    n, c, h, w = x.shape
    oh, pt, pb = same_pad(h, k, s)
    ow, pl, pr = same_pad(w, k, s)
    if pt or pb or pl or pr:
        xt = np.zeros((c, n, h + pt + pb, w + pl + pr), dtype=x.dtype)
        xt[:, :, pt : pt + h, pl : pl + w] = x.transpose(1, 0, 2, 3)
    else:
        xt = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
    return xt, oh, ow, (pt, pl)


def _cols_from(xt, k, oh, ow):
    """Materialize im2col columns (ci, k, k, n, oh, ow) from padded channel-first input."""
    ci, n = xt.shape[0], xt.shape[1]
    cols = np.empty((ci, k, k, n, oh, ow), dtype=xt.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, ki, kj] = xt[:, :, ki : ki + oh, kj : kj + ow]
    return cols


def _conv1_cfirst(xt, w):
    """Stride-1 valid convolution on padded channel-first input.

    xt: (ci, n, hp, wp); w: (co, ci, k, k); returns (co, n, hp-k+1, wp-k+1).
    Picks whichever of the tap-GEMM or im2col formulation needs the smaller
    intermediate buffer; both keep every GEMM operand contiguous.
    """
    co, ci, k, _ = w.shape
    _, n, hp, wp = xt.shape
    oh, ow = hp - k + 1, wp - k + 1
    if k == 1:
        return (w[:, :, 0, 0] @ xt.reshape(ci, n * hp * wp)).reshape(co, n, hp, wp)
    if k * k * co * hp * wp <= ci * k * k * oh * ow:
        wt = np.ascontiguousarray(w.transpose(2, 3, 0, 1)).reshape(k * k * co, ci)
        full = (wt @ xt.reshape(ci, n * hp * wp)).reshape(k, k, co, n, hp, wp)
        yb = np.zeros((co, n, oh, ow), dtype=xt.dtype)
        for ki in range(k):
            for kj in range(k):
                yb += full[ki, kj, :, :, ki : ki + oh, kj : kj + ow]
        return yb
    cols = _cols_from(xt, k, oh, ow)
    wm = np.ascontiguousarray(w.reshape(co, ci * k * k))
    return (wm @ cols.reshape(ci * k * k, n * oh * ow)).reshape(co, n, oh, ow)


def conv2d_forward(x, w, b, stride):
    co, ci, k, _ = w.shape
    n, c, h, _w = x.shape
    if c != ci:
        raise ShapeError(f"conv2d input has {c} channels, weights expect {ci}")
    if w.shape[2] != w.shape[3] or k % 2 == 0:
        raise ShapeError("conv2d kernel must be square with odd size")
    if k == 1 and stride == 1:
        yv = np.tensordot(w[:, :, 0, 0], x, axes=([1], [1]))  # (co, n, h, w)
        y = np.ascontiguousarray(yv.transpose(1, 0, 2, 3))
        oh, ow = h, _w
        ctx = (x, None, w, b is not None, stride)
    else:
        xt, oh, ow, _ = _pad_input_cfirst(x, k, stride)
        if stride == 1:
            yb = _conv1_cfirst(xt, w)
        else:
            yb = np.zeros((co, n, oh, ow), dtype=x.dtype)
            wt = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
            for ki in range(k):
                for kj in range(k):
                    slab = xt[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
                    yb += np.tensordot(wt[ki, kj], slab, axes=([1], [0]))
        y = np.ascontiguousarray(yb.transpose(1, 0, 2, 3))
        ctx = (x, xt, w, b is not None, stride)
    if b is not None:
        y += b.reshape(1, co, 1, 1)
    mac_counter.add("conv2d", n * oh * ow * k * k * ci * co)
    return y, ctx


def conv2d_backward(ctx, gy):
    x, xt, w, has_bias, stride = ctx
    co, ci, k, _ = w.shape
    n, _, h, wd = x.shape
    gb = gy.sum(axis=(0, 2, 3)) if has_bias else None
    if k == 1 and stride == 1:
        gw = np.zeros_like(w)
        gw[:, :, 0, 0] = np.tensordot(gy, x, axes=([0, 2, 3], [0, 2, 3]))
        gx = np.tensordot(w[:, :, 0, 0], gy, axes=([0], [1])).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(gx), gw, gb
    oh, ow = gy.shape[2], gy.shape[3]
    pt, pl = same_pad(h, k, stride)[1], same_pad(wd, k, stride)[1]
    gyt = np.ascontiguousarray(gy.transpose(1, 0, 2, 3))  # (co, n, oh, ow)
    if stride == 1:
        hp, wp = xt.shape[2], xt.shape[3]
        # input gradient is itself a stride-1 same conv: flipped, transposed
        # weights applied to the symmetrically padded upstream gradient
        pad = (k - 1) // 2
        gyp = np.zeros((co, n, oh + 2 * pad, ow + 2 * pad), dtype=gyt.dtype)
        gyp[:, :, pad : pad + oh, pad : pad + ow] = gyt
        wflip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gxb = _conv1_cfirst(gyp, wflip)
        # weight gradient: canvas-GEMM or im2col, whichever buffer is smaller
        if k * k * co * hp * wp <= ci * k * k * oh * ow:
            canvas = np.zeros((k, k, co, n, hp, wp), dtype=gy.dtype)
            for ki in range(k):
                for kj in range(k):
                    canvas[ki, kj, :, :, ki : ki + oh, kj : kj + ow] = gyt
            gw9 = canvas.reshape(k * k * co, n * hp * wp) @ xt.reshape(ci, -1).T
            gw = np.ascontiguousarray(gw9.reshape(k, k, co, ci).transpose(2, 3, 0, 1))
        else:
            cols = _cols_from(xt, k, oh, ow)
            gwm = gyt.reshape(co, n * oh * ow) @ cols.reshape(ci * k * k, -1).T
            gw = np.ascontiguousarray(gwm.reshape(co, ci, k, k))
        gx = gxb.transpose(1, 0, 2, 3)
        return np.ascontiguousarray(gx), gw, gb
    gym = gyt.reshape(co, n * oh * ow)
    gxt = np.zeros_like(xt)
    wt = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
    gw = np.empty_like(w)
    for ki in range(k):
        for kj in range(k):
            slab = xt[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
            gw[:, :, ki, kj] = np.tensordot(gyt, slab, axes=([1, 2, 3], [1, 2, 3]))
            t = (wt[ki, kj].T @ gym).reshape(ci, n, oh, ow)
            gxt[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += t
    gx = gxt[:, :, pt : pt + h, pl : pl + wd].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(gx), gw, gb


def depthwise_conv2d_forward(x, w, stride):
    c, one, k, _ = w.shape
    if one != 1:
        raise ShapeError("depthwise weights must be shaped (C, 1, K, K)")
    if x.shape[1] != c:
        raise ShapeError(f"depthwise input has {x.shape[1]} channels, weights expect {c}")
    n = x.shape[0]
    xt, oh, ow, _ = _pad_input_cfirst(x, k, stride)
    yb = np.zeros((c, n, oh, ow), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            slab = xt[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
            yb += w[:, 0, ki, kj].reshape(c, 1, 1, 1) * slab
    y = np.ascontiguousarray(yb.transpose(1, 0, 2, 3))
    mac_counter.add("depthwise_conv2d", n * oh * ow * k * k * c)
    return y, (x, xt, w, stride)


def depthwise_conv2d_backward(ctx, gy):
    x, xt, w, stride = ctx
    c, _, k, _ = w.shape
    n, _, h, wd = x.shape
    oh, ow = gy.shape[2], gy.shape[3]
    pt, pl = same_pad(h, k, stride)[1], same_pad(wd, k, stride)[1]
    gyt = np.ascontiguousarray(gy.transpose(1, 0, 2, 3))
    gw = np.empty_like(w)
    gxt = np.zeros_like(xt)
    for ki in range(k):
        for kj in range(k):
            slab = xt[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
            gw[:, 0, ki, kj] = np.einsum("cnhw,cnhw->c", gyt, slab)
            gxt[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += (
                w[:, 0, ki, kj].reshape(c, 1, 1, 1) * gyt
            )
    gx = gxt[:, :, pt : pt + h, pl : pl + wd].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(gx), gw


# ---------------------------------------------------------------------------
# pooling / resampling


def avg_pool2_forward(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial extents, got {h}x{w}")
    y = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return y, (h, w)


def avg_pool2_backward(ctx, gy):
    h, w = ctx
    g = gy * np.asarray(0.25, dtype=gy.dtype)
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)


@lru_cache(maxsize=None)
def _upsample_matrix(size: int, dtype_name: str) -> np.ndarray:
    """(2*size, size) interpolation matrix: half-pixel centers, edge clamp."""
    a = np.zeros((2 * size, size), dtype=np.float64)
    for i in range(2 * size):
        src = (i + 0.5) / 2.0 - 0.5
        lo = int(math.floor(src))
        frac = src - lo
        lo_c = min(max(lo, 0), size - 1)
        hi_c = min(max(lo + 1, 0), size - 1)
        a[i, lo_c] += 1.0 - frac
        a[i, hi_c] += frac
    return a.astype(np.dtype(dtype_name))


def bilinear_upsample2_forward(x):
    n, c, h, w = x.shape
    ah = _upsample_matrix(h, x.dtype.name)
    aw = _upsample_matrix(w, x.dtype.name)
    y = np.tensordot(x, ah, axes=([2], [1]))  # (n, c, w, 2h)
    y = np.tensordot(y, aw, axes=([2], [1]))  # (n, c, 2h, 2w)
    return np.ascontiguousarray(y), (h, w)


def bilinear_upsample2_backward(ctx, gy):
    h, w = ctx
    ah = _upsample_matrix(h, gy.dtype.name)
    aw = _upsample_matrix(w, gy.dtype.name)
    g = np.tensordot(gy, ah, axes=([2], [0]))  # (n, c, 2w, h)
    g = np.tensordot(g, aw, axes=([2], [0]))  # (n, c, h, w)
    return np.ascontiguousarray(g)


# ---------------------------------------------------------------------------
# normalization and activations


def batch_norm_forward(x, gamma, beta, running_mean, running_var, momentum, eps, mode):
    n, c, h, w = x.shape
    if mode == "train":
        if n * h * w < 2:
            raise ShapeError("batch norm training mode needs >= 2 values per channel")
        m = n * h * w
        mean = x.mean(axis=(0, 2, 3))
        # biased variance via E[x^2] - E[x]^2 (single reduction pass)
        var = np.einsum("nchw,nchw->c", x, x) / m - mean * mean
        np.maximum(var, 0.0, out=var)
        new_rm = momentum * running_mean + (1.0 - momentum) * mean
        new_rv = momentum * running_var + (1.0 - momentum) * var
    elif mode == "infer":
        mean, var = running_mean, running_var
        new_rm, new_rv = running_mean, running_var
    else:
        raise ValueError(f"unknown batch norm mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    # fold normalization and affine into one scale/shift pass
    a = (gamma * inv_std).reshape(1, c, 1, 1)
    shift = (beta - gamma * inv_std * mean).reshape(1, c, 1, 1).astype(x.dtype)
    y = x * a.astype(x.dtype) + shift
    ctx = (x, mean.astype(x.dtype), inv_std, gamma, mode)
    return y, ctx, new_rm, new_rv


def batch_norm_backward(ctx, gy):
    x, mean, inv_std, gamma, mode = ctx
    c = x.shape[1]
    gbeta = gy.sum(axis=(0, 2, 3))
    # ggamma = sum(gy * xhat) without materializing xhat
    gyx = np.einsum("nchw,nchw->c", gy, x)
    ggamma = ((gyx - mean * gbeta) * inv_std).astype(gamma.dtype, copy=False)
    if mode == "infer":
        return gy * (gamma * inv_std).reshape(1, c, 1, 1), ggamma, gbeta
    m = x.shape[0] * x.shape[2] * x.shape[3]
    # gradient through the batch mean and variance, folded to gx = A*gy + B*x + C
    gam = gamma.astype(x.dtype, copy=False)
    a = gam * inv_std
    bcoef = -gam * ggamma.astype(x.dtype, copy=False) * inv_std**2 / m
    ccoef = -a * gbeta.astype(x.dtype, copy=False) / m - mean * bcoef
    gx = gy * a.reshape(1, c, 1, 1)
    gx += x * bcoef.reshape(1, c, 1, 1)
    gx += ccoef.reshape(1, c, 1, 1)
    return gx, ggamma, gbeta


def leaky_relu_forward(x, alpha):
    a = np.asarray(alpha, dtype=x.dtype)
    y = np.maximum(x, a * x)
    # per-element slope: 1 on the positive branch, alpha on the negative one
    slope = np.where(x >= 0, np.asarray(1.0, dtype=x.dtype), a)
    return y, slope


def leaky_relu_backward(ctx, gy):
    slope = ctx
    return gy * slope


def sigmoid_forward(x):
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    # clamp away exact 0/1 so the output stays in the open interval
    tiny = np.finfo(x.dtype).tiny
    np.clip(y, tiny, 1.0 - np.finfo(x.dtype).epsneg, out=y)
    return y, y


def sigmoid_backward(ctx, gy):
    y = ctx
    return gy * y * (1.0 - y)


# ---------------------------------------------------------------------------
# dense and structural ops


def dense_forward(x, w, b):
    n = x.shape[0]
    ci = x.size // n
    co = w.shape[0]
    if w.shape[1] != ci:
        raise ShapeError(f"dense input length {ci} != weight columns {w.shape[1]}")
    xf = x.reshape(n, ci)
    y = xf @ w.T
    if b is not None:
        y = y + b
    mac_counter.add("dense", n * ci * co)
    return y.reshape(n, co, 1, 1), (x.shape, xf, w, b is not None)


def dense_backward(ctx, gy):
    x_shape, xf, w, has_bias = ctx
    n, co = gy.shape[0], gy.shape[1]
    gyf = gy.reshape(n, co)
    gw = gyf.T @ xf
    gx = (gyf @ w).reshape(x_shape)
    gb = gyf.sum(axis=0) if has_bias else None
    return gx, gw, gb


def concat_channels_forward(a, b):
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat mismatch: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1), (a.shape[1], b.shape[1])


def concat_channels_backward(ctx, gy):
    ca, _ = ctx
    return np.ascontiguousarray(gy[:, :ca]), np.ascontiguousarray(gy[:, ca:])


def channel_split_forward(x, at):
    if not 0 < at < x.shape[1]:
        raise ShapeError(f"split index {at} out of range for {x.shape[1]} channels")
    return np.ascontiguousarray(x[:, :at]), np.ascontiguousarray(x[:, at:])


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Output channel j*g + k reads input channel k*(C/g) + j."""
    if channels % groups:
        raise ShapeError(f"{channels} channels not divisible by {groups} groups")
    per = channels // groups
    idx = np.arange(channels).reshape(groups, per).T.reshape(-1)
    return idx


def channel_shuffle_forward(x, groups):
    idx = shuffle_permutation(x.shape[1], groups)
    return np.ascontiguousarray(x[:, idx]), idx


def channel_shuffle_backward(ctx, gy):
    idx = ctx
    inv = np.empty_like(idx)
    inv[idx] = np.arange(idx.size)
    return np.ascontiguousarray(gy[:, inv])


# ---------------------------------------------------------------------------
# initializers


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
