"""Dense NCHW tensors and the primitive layer operations.

Tensors are plain C-contiguous numpy float64 arrays; image-like data is
laid out N x C x H x W. Every primitive checks its output for NaN/Inf so a
numerical fault surfaces at the op that produced it instead of propagating.

Spatial ops follow one padding rule ("same-ceil"): a stride-s op maps
extent E to ceil(E/s), padding split as evenly as possible with the extra
pixel at the bottom/right. This is what keeps skip-connection shapes
aligned for arbitrary input sizes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from depthforge import kernels

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NumericalError(FloatingPointError):
    """An op produced NaN or Inf."""


def as_tensor(data, shape=None):
    """Coerce to a C-contiguous float64 array, optionally reshaped."""
    arr = np.ascontiguousarray(data, dtype=DTYPE)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def check_finite(arr, ctx=""):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values{' in ' + ctx if ctx else ''}")
    return arr


def ceil_div(extent, stride):
    return -(-extent // stride)


def same_ceil_padding(extent, k, stride):
    """Per-side (lo, hi) zero padding so output extent = ceil(extent/stride)."""
    out = ceil_div(extent, stride)
    need = max(0, (out - 1) * stride + k - extent)
    lo = need // 2
    return lo, need - lo


@dataclass(frozen=True)
class ConvSpec:
    """Square k x k convolution at stride s with same-ceil padding."""

    kernel: int
    stride: int
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1:
            raise ValueError("kernel and stride must be >= 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")

    def padding_for(self, h, w):
        """(top, bottom, left, right) for an H x W input."""
        pt, pb = same_ceil_padding(h, self.kernel, self.stride)
        pl, pr = same_ceil_padding(w, self.kernel, self.stride)
        return pt, pb, pl, pr

    def out_hw(self, h, w):
        return ceil_div(h, self.stride), ceil_div(w, self.stride)


def conv2d(x, w, b, spec: ConvSpec):
    """Forward convolution (cross-correlation) under the same-ceil rule."""
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"conv2d input {x.shape} incompatible with in_channels={spec.in_channels}")
    if w.shape != (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel):
        raise ShapeError(
            f"conv2d weights {w.shape} != "
            f"{(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)}")
    if b.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d bias {b.shape} != ({spec.out_channels},)")
    pads = spec.padding_for(x.shape[2], x.shape[3])
    y = kernels.conv2d_forward(x, w, b, spec.stride, pads)
    return check_finite(y, "conv2d")


def conv2d_backward(x, w, spec: ConvSpec, gy):
    pads = spec.padding_for(x.shape[2], x.shape[3])
    gx, gw, gb = kernels.conv2d_backward(x, w, spec.stride, pads, gy)
    check_finite(gx, "conv2d backward")
    return gx, gw, gb


def max_pool2d(x, k, stride):
    """Max over (-inf padded) k x k windows; also returns argmax routing info."""
    if k < 1 or stride < 1:
        raise ValueError("pool kernel and stride must be >= 1")
    pt, pb = same_ceil_padding(x.shape[2], k, stride)
    pl, pr = same_ceil_padding(x.shape[3], k, stride)
    y, arg = kernels.maxpool_forward(x, k, stride, (pt, pb, pl, pr))
    return check_finite(y, "max_pool2d"), arg


def max_pool2d_backward(x_shape, k, stride, arg, gy):
    pt, pb = same_ceil_padding(x_shape[2], k, stride)
    pl, pr = same_ceil_padding(x_shape[3], k, stride)
    return kernels.maxpool_backward(x_shape, k, stride, (pt, pb, pl, pr), arg, gy)


def unpool2x(x):
    """Double H and W; each value lands at the top-left of its 2x2 cell."""
    n, c, h, w = x.shape
    y = np.zeros((n, c, 2 * h, 2 * w), dtype=x.dtype)
    y[:, :, ::2, ::2] = x
    return y


def unpool2x_backward(gy):
    return np.ascontiguousarray(gy[:, :, ::2, ::2])


BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # weight of the old running statistic


@dataclass
class BNState:
    """Running statistics for one batch-norm layer (biased variance)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    updates: int = 0

    @classmethod
    def for_channels(cls, c):
        return cls(np.zeros(c, dtype=DTYPE), np.ones(c, dtype=DTYPE))


def batch_norm(x, gamma, beta, state: BNState, training):
    """Per-channel normalization.

    Train mode normalizes by batch statistics and updates the running ones;
    eval mode requires populated running statistics. Returns (y, cache) where
    cache feeds batch_norm_backward.
    """
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError("batch_norm gamma/beta must have one value per channel")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        state.running_mean = BN_MOMENTUM * state.running_mean + (1 - BN_MOMENTUM) * mean
        state.running_var = BN_MOMENTUM * state.running_var + (1 - BN_MOMENTUM) * var
        state.updates += 1
    else:
        if state.updates == 0:
            raise ValueError("batch_norm eval mode requires populated running statistics")
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, inv_std, gamma, training)
    return check_finite(y, "batch_norm"), cache


def batch_norm_backward(cache, gy):
    """Gradients w.r.t. (x, gamma, beta); train mode includes the mean/var paths."""
    xhat, inv_std, gamma, training = cache
    gbeta = gy.sum(axis=(0, 2, 3))
    ggamma = (gy * xhat).sum(axis=(0, 2, 3))
    gxhat = gy * gamma[None, :, None, None]
    if training:
        mean_g = gxhat.mean(axis=(0, 2, 3))[None, :, None, None]
        mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
        gx = inv_std[None, :, None, None] * (gxhat - mean_g - xhat * mean_gx)
    else:
        gx = inv_std[None, :, None, None] * gxhat
    return gx, ggamma, gbeta


# --- serialization: little-endian header (rank, extents as u64) + f64 data ---

def write_tensor(fp, arr):
    arr = as_tensor(arr)
    fp.write(struct.pack("<Q", arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fp.write(arr.tobytes())


def read_tensor(fp):
    rank = struct.unpack("<Q", fp.read(8))[0]
    shape = struct.unpack(f"<{rank}Q", fp.read(8 * rank))
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(fp.read(8 * count), dtype="<f8", count=count)
    return data.reshape(shape).astype(DTYPE)
