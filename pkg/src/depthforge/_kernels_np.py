"""Pure-numpy implementations of the hot kernels (convolution, max pooling).

These are the fallback used when the compiled extension is unavailable.
All arrays are NCHW, C-contiguous float64. Padding amounts are explicit
per side: pads = (top, bottom, left, right). Convolution pads with zeros,
pooling with -inf, so a stride-s op maps extent E to (E + pad - k)//s + 1,
which the caller arranges to equal ceil(E/s).
"""

import numpy as np

BACKEND_NAME = "numpy"


def _im2col(xp, k, stride, oh, ow):
    """Gather k*k patches of the padded input into (N, C, k, k, oh, ow)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, oh, ow), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + (oh - 1) * stride + 1:stride,
                                  j:j + (ow - 1) * stride + 1:stride]
    return cols


def _pad_hw(x, pads, value):
    pt, pb, pl, pr = pads
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)),
                  mode="constant", constant_values=value)


def _out_extent(extent, k, stride, lo, hi):
    return (extent + lo + hi - k) // stride + 1


def conv2d_forward(x, w, b, stride, pads):
    """Cross-correlate x (N,Cin,H,W) with w (Cout,Cin,k,k), add bias b (Cout,)."""
    k = w.shape[2]
    xp = _pad_hw(x, pads, 0.0)
    oh = _out_extent(x.shape[2], k, stride, pads[0], pads[1])
    ow = _out_extent(x.shape[3], k, stride, pads[2], pads[3])
    cols = _im2col(xp, k, stride, oh, ow)
    y = np.tensordot(w, cols, axes=([1, 2, 3], [1, 2, 3]))  # (Cout, N, oh, ow)
    y = np.ascontiguousarray(y.transpose(1, 0, 2, 3))
    y += b[None, :, None, None]
    return y


def conv2d_backward(x, w, stride, pads, gy):
    """Gradients of conv2d_forward w.r.t. input, weights and bias."""
    n, cin, h, wd = x.shape
    k = w.shape[2]
    pt, pb, pl, pr = pads
    oh, ow = gy.shape[2], gy.shape[3]

    xp = _pad_hw(x, pads, 0.0)
    cols = _im2col(xp, k, stride, oh, ow)

    gb = gy.sum(axis=(0, 2, 3))
    gw = np.tensordot(gy, cols, axes=([0, 2, 3], [0, 4, 5]))  # (Cout,Cin,k,k)

    # Scatter w^T @ gy back through the patch gather.
    gcols = np.tensordot(w, gy, axes=([0], [1]))  # (Cin, k, k, N, oh, ow)
    gxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + (oh - 1) * stride + 1:stride,
                j:j + (ow - 1) * stride + 1:stride] += \
                gcols[:, i, j].transpose(1, 0, 2, 3)
    gx = gxp[:, :, pt:pt + h, pl:pl + wd]
    return np.ascontiguousarray(gx), np.ascontiguousarray(gw), gb


def maxpool_forward(x, k, stride, pads):
    """Max over (-inf padded) k*k windows.

    Returns (y, arg) where arg holds the flat in-window index (row-major,
    i*k + j) of the first maximum, as used for gradient routing.
    """
    xp = _pad_hw(x, pads, -np.inf)
    oh = _out_extent(x.shape[2], k, stride, pads[0], pads[1])
    ow = _out_extent(x.shape[3], k, stride, pads[2], pads[3])
    windows = _im2col(xp, k, stride, oh, ow)  # (N, C, k, k, oh, ow)
    n, c = x.shape[:2]
    flat = windows.reshape(n, c, k * k, oh, ow)
    arg = flat.argmax(axis=2).astype(np.int32)  # first max wins ties
    y = np.take_along_axis(flat, arg[:, :, None].astype(np.int64), axis=2)[:, :, 0]
    return np.ascontiguousarray(y), arg


def maxpool_backward(x_shape, k, stride, pads, arg, gy):
    """Route gy to the argmax positions recorded by maxpool_forward."""
    n, c, h, w = x_shape
    pt, pb, pl, pr = pads
    oh, ow = gy.shape[2], gy.shape[3]
    gxp = np.zeros((n, c, h + pt + pb, w + pl + pr), dtype=gy.dtype)
    for i in range(k):
        for j in range(k):
            sel = (arg == i * k + j)
            if not sel.any():
                continue
            gxp[:, :, i:i + (oh - 1) * stride + 1:stride,
                j:j + (ow - 1) * stride + 1:stride] += gy * sel
    return np.ascontiguousarray(gxp[:, :, pt:pt + h, pl:pl + w])
