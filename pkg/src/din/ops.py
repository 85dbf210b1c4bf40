"""Differentiable primitives on N x C x H x W tensors.

Every op returns a new `Tensor` and, when any input requires grad, records
a backward closure. Arrays keep the dtype of their inputs: float64 for
gradient checks, float32 for training.
"""

from __future__ import annotations

import functools
import math
from fractions import Fraction

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .profiler import record
from .tensor import ShapeError, Tensor

__all__ = [
    "conv2d",
    "conv2d_mult_adds",
    "depthwise_conv1x1",
    "depthwise_mult_adds",
    "leaky_relu",
    "relu",
    "sigmoid",
    "global_avg_pool",
    "concat_channels",
    "slice_channels",
    "add",
    "sub",
    "mul",
    "scale",
    "channel_mul",
    "pair_softmax",
    "pixel_shuffle",
    "pixel_unshuffle",
    "bicubic_resize",
    "resize_matrix",
    "cubic_kernel",
    "abs_",
    "sum_",
    "mean",
]


def _check_4d(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what} must be N x C x H x W, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def conv2d_mult_adds(cin: int, cout: int, k: int, hout: int, wout: int) -> int:
    return cout * cin * k * k * hout * wout


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of `x` with `weight` (Cout x Cin x k x k)."""
    _check_4d(x, "conv2d input")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be Cout x Cin x k x k, got {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, k, _ = weight.shape
    if c != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"invalid stride={stride} / pad={pad}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {k} larger than padded input {x.shape} (pad={pad})")
    record("conv2d", conv2d_mult_adds(cin, cout, k, ho, wo))

    w2 = weight.data.reshape(cout, cin * k * k)
    pointwise = k == 1 and stride == 1 and pad == 0
    if pointwise:
        cols = x.data.reshape(n, c, h * w)
        out = np.matmul(w2, cols)
        if bias is not None:
            out += bias.data[None, :, None]
        out = out.reshape(n, cout, ho, wo)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        # (N, C, Ho, Wo, k, k) -> (C*k*k, N*Ho*Wo)
        cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * ho * wo)
        out = np.matmul(w2, cols)
        if bias is not None:
            out += bias.data[:, None]
        out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def _backward(g):
        if pointwise:
            g3 = g.reshape(n, cout, ho * wo)
            if weight.requires_grad:
                weight._accumulate(np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape))
            if bias is not None and bias.requires_grad:
                bias._accumulate(g3.sum(axis=(0, 2)))
            if x.requires_grad:
                x._accumulate(np.matmul(w2.T, g3).reshape(x.shape))
            return
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        if weight.requires_grad:
            weight._accumulate((g2 @ cols.T).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=1))
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c, k, k, n, ho, wo)
            dxp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
            for ky in range(k):
                for kx in range(k):
                    dxp[:, :, ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride] += dcols[:, ky, kx]
            x._accumulate(dxp[:, :, pad:pad + h, pad:pad + w].transpose(1, 0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, _backward)


def depthwise_mult_adds(c: int, h: int, w: int, kernel: int = 1) -> int:
    """Depth-wise conv cost: kernel^2 * C * H * W."""
    return kernel * kernel * c * h * w


def depthwise_conv1x1(x: Tensor, weight: Tensor) -> Tensor:
    """Scale channel c of `x` by `weight[c]` (1x1 depth-wise conv, no bias)."""
    _check_4d(x, "depthwise_conv1x1 input")
    n, c, h, w = x.shape
    if weight.data.reshape(-1).shape != (c,):
        raise ShapeError(f"depthwise weight has {weight.size} entries, input has {c} channels ({x.shape})")
    record("depthwise_conv1x1", depthwise_mult_adds(c, h, w))
    wv = weight.data.reshape(1, c, 1, 1)
    out = x.data * wv

    def _backward(g):
        if x.requires_grad:
            x._accumulate(g * wv)
        if weight.requires_grad:
            weight._accumulate((g * x.data).sum(axis=(0, 2, 3)).reshape(weight.shape))

    return Tensor._make(out, (x, weight), _backward)


# ---------------------------------------------------------------------------
# pointwise


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data >= 0
    out = np.where(mask, x.data, slope * x.data)

    def _backward(g):
        x._accumulate(np.where(mask, g, slope * g))

    return Tensor._make(out, (x,), _backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def _backward(g):
        x._accumulate(g * mask)

    return Tensor._make(out, (x,), _backward)


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def _backward(g):
        x._accumulate(g * out * (1.0 - out))

    return Tensor._make(out, (x,), _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}")

    def _backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return Tensor._make(a.data + b.data, (a, b), _backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub needs identical shapes, got {a.shape} and {b.shape}")

    def _backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return Tensor._make(a.data - b.data, (a, b), _backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise product of equal-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul needs identical shapes, got {a.shape} and {b.shape}")

    def _backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return Tensor._make(a.data * b.data, (a, b), _backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def _backward(g):
        a._accumulate(g * s)

    return Tensor._make(a.data * a.dtype.type(s), (a,), _backward)


def channel_mul(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each (n, c) feature map of `x` by the scalar `s[n, c, 0, 0]`."""
    _check_4d(x, "channel_mul input")
    n, c = x.shape[:2]
    if s.shape != (n, c, 1, 1):
        raise ShapeError(f"channel_mul weights must be {(n, c, 1, 1)}, got {s.shape}")

    def _backward(g):
        if x.requires_grad:
            x._accumulate(g * s.data)
        if s.requires_grad:
            s._accumulate((g * x.data).sum(axis=(2, 3), keepdims=True))

    return Tensor._make(x.data * s.data, (x, s), _backward)


def pair_softmax(a: Tensor, b: Tensor) -> Tensor:
    """Softmax across the pair (a[c], b[c]) for each channel.

    Returns a tensor with 2C channels: the weights for `a` followed by the
    weights for `b`. Both banks are positive and sum to one per channel.
    """
    if a.shape != b.shape:
        raise ShapeError(f"pair_softmax needs identical shapes, got {a.shape} and {b.shape}")
    m = np.maximum(a.data, b.data)
    ea = np.exp(a.data - m)
    eb = np.exp(b.data - m)
    z = ea + eb
    pa = ea / z
    pb = eb / z
    out = np.concatenate([pa, pb], axis=1)

    def _backward(g):
        c = a.shape[1]
        ga, gb = g[:, :c], g[:, c:]
        # d pa/d a = pa*pb, d pb/d a = -pa*pb; mirrored for b
        common = pa * pb * (ga - gb)
        if a.requires_grad:
            a._accumulate(common)
        if b.requires_grad:
            b._accumulate(-common)

    return Tensor._make(out, (a, b), _backward)


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def _backward(g):
        x._accumulate(g * sign)

    return Tensor._make(np.abs(x.data), (x,), _backward)


# ---------------------------------------------------------------------------
# reductions and layout


def sum_(x: Tensor) -> Tensor:
    """Sum of all elements as a 1x1x1x1 tensor."""
    out = x.data.sum(dtype=x.dtype).reshape(1, 1, 1, 1)

    def _backward(g):
        x._accumulate(np.broadcast_to(g.reshape(()), x.shape))

    return Tensor._make(out, (x,), _backward)


def mean(x: Tensor) -> Tensor:
    """Mean of all elements as a 1x1x1x1 tensor."""
    n = x.size
    out = (x.data.sum(dtype=x.dtype) / n).reshape(1, 1, 1, 1)

    def _backward(g):
        x._accumulate(np.broadcast_to(g.reshape(()) / n, x.shape))

    return Tensor._make(out, (x,), _backward)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_4d(x, "global_avg_pool input")
    n, c, h, w = x.shape
    if h * w < 1:
        raise ShapeError(f"global_avg_pool needs H*W >= 1, got {x.shape}")
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def _backward(g):
        x._accumulate(np.broadcast_to(g / (h * w), x.shape))

    return Tensor._make(out, (x,), _backward)


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate along channels, first argument's channels first."""
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    for t in tensors:
        _check_4d(t, "concat_channels operand")
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels N/H/W mismatch: {tensors[0].shape} vs {t.shape}")
    if len(tensors) == 1:
        return tensors[0]
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def _backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(g[:, lo:hi])

    return Tensor._make(out, tensors, _backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check_4d(x, "slice_channels input")
    c = x.shape[1]
    if not 0 <= start <= stop <= c:
        raise ShapeError(f"channel slice [{start}, {stop}) out of range for {x.shape}")
    out = x.data[:, start:stop].copy()

    def _backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        x._accumulate(full)

    return Tensor._make(out, (x,), _backward)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(N, C*r^2, H, W) -> (N, C, r*H, r*W); out[n,c,rh+dy,rw+dx] = in[n, c*r^2+dy*r+dx, h, w]."""
    _check_4d(x, "pixel_shuffle input")
    n, c, h, w = x.shape
    if r < 1 or c % (r * r):
        raise ShapeError(f"pixel_shuffle: channels {c} not divisible by r^2={r * r}")
    co = c // (r * r)
    out = x.data.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)

    def _backward(g):
        x._accumulate(g.reshape(n, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape))

    return Tensor._make(np.ascontiguousarray(out), (x,), _backward)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Exact inverse of `pixel_shuffle`."""
    _check_4d(x, "pixel_unshuffle input")
    n, c, h, w = x.shape
    if r < 1 or h % r or w % r:
        raise ShapeError(f"pixel_unshuffle: spatial dims {h}x{w} not divisible by {r}")
    ho, wo = h // r, w // r
    out = x.data.reshape(n, c, ho, r, wo, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, ho, wo)

    def _backward(g):
        x._accumulate(g.reshape(n, c, r, r, ho, wo).transpose(0, 1, 4, 2, 5, 3).reshape(x.shape))

    return Tensor._make(np.ascontiguousarray(out), (x,), _backward)


# ---------------------------------------------------------------------------
# bicubic resampling


def cubic_kernel(t, a: float = -0.5):
    """Keys cubic convolution kernel."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


@functools.lru_cache(maxsize=256)
def resize_matrix(in_size: int, out_size: int, scale: float) -> np.ndarray:
    """Row-stochastic (out_size x in_size) bicubic resampling matrix.

    Output pixel i samples input coordinate (i + 0.5) / scale - 0.5. When
    shrinking, the kernel is stretched by 1/scale (anti-aliasing). Taps
    beyond the border are clamped to the edge pixel.
    """
    support = 2.0 / min(scale, 1.0)
    stretch = min(scale, 1.0)
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    for i in range(out_size):
        center = (i + 0.5) / scale - 0.5
        lo = math.floor(center - support) + 1
        hi = math.ceil(center + support)
        taps = np.arange(lo, hi)
        wts = cubic_kernel((center - taps) * stretch) * stretch
        wts /= wts.sum()
        np.add.at(mat[i], np.clip(taps, 0, in_size - 1), wts)
    mat.setflags(write=False)
    return mat


def bicubic_resize(x: Tensor, scale) -> Tensor:
    """Resize H and W by `scale` (float or Fraction) with a Keys a=-0.5 kernel.

    Output size is round(H * scale) x round(W * scale).
    """
    _check_4d(x, "bicubic_resize input")
    scale_q = Fraction(scale).limit_denominator(10_000) if not isinstance(scale, Fraction) else scale
    if scale_q <= 0:
        raise ValueError(f"bicubic_resize scale must be positive, got {scale}")
    n, c, h, w = x.shape
    ho, wo = round(h * scale_q), round(w * scale_q)
    if ho < 1 or wo < 1:
        raise ShapeError(f"scale {scale} collapses {x.shape} to zero size")
    s = float(scale_q)
    ah = resize_matrix(h, ho, s).astype(x.dtype, copy=False)
    aw = resize_matrix(w, wo, s).astype(x.dtype, copy=False)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def _backward(g):
        x._accumulate(np.matmul(np.matmul(ah.T, g), aw))

    return Tensor._make(out, (x,), _backward)
