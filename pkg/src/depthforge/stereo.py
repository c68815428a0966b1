"""Rectified-stereo warping, subpixel bilinear sampling and Gaussian smoothing.

Geometry convention: a scene point at inverse depth rho seen at column x in
the reference view appears at column x - sign * f*b * rho in the other view
(sign +1 when the reference is the left image, -1 for the right one; the
vertical coordinate is untouched on rectified pairs). A pixel is valid iff
its warped column lies inside [0, W-1].

Functions here accept either plain arrays or autodiff Vars; sampling
gradients flow both to the source image and to the warped coordinates,
which is how inverse depth receives its photometric gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from depthforge.autodiff import Var
from depthforge.ndtensor import DTYPE


@dataclass(frozen=True)
class Calib:
    """Rectified stereo calibration: focal length (px) and baseline (m)."""

    f: float
    b: float

    def __post_init__(self):
        if not (self.f > 0 and self.b > 0):
            raise ValueError("focal length and baseline must be positive")

    @property
    def fb(self):
        return self.f * self.b

    def halved(self):
        """Calibration of the same rig at half image resolution."""
        return Calib(self.f / 2.0, self.b)


def warp_coord(x_col, rho, calib: Calib, sign):
    """Warped column coordinate: x - sign * fb * rho (row unchanged)."""
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    return x_col - (sign * calib.fb) * rho


def column_grid(shape):
    """Column-index array broadcastable over an (..., H, W) map."""
    return np.broadcast_to(np.arange(shape[-1], dtype=DTYPE), shape).copy()


def row_grid(shape):
    h, w = shape[-2], shape[-1]
    return np.broadcast_to(np.arange(h, dtype=DTYPE)[:, None], shape).copy()


def _gather(img, n_idx, y_idx, x_idx):
    # img (N,C,H,W), index maps (N,1,H,W) -> (N,C,H,W)
    c = img.shape[1]
    out = np.empty((img.shape[0], c) + y_idx.shape[2:], dtype=img.dtype)
    for ci in range(c):
        out[:, ci] = img[:, ci][n_idx[:, 0], y_idx[:, 0], x_idx[:, 0]]
    return out


def _bilinear_forward(img, cx, cy):
    """4-neighbor interpolation of img (N,C,H,W) at per-pixel coordinates.

    cx/cy have shape (N,1,H',W'). Returns (values, mask, cache); invalid
    pixels (warped outside [0, W-1] x [0, H-1]) get value 0.
    """
    n, c, h, w = img.shape
    valid = (cx >= 0) & (cx <= w - 1) & (cy >= 0) & (cy <= h - 1)

    x0 = np.floor(cx)
    y0 = np.floor(cy)
    fx = cx - x0
    fy = cy - y0
    xi0 = np.clip(x0, 0, w - 1).astype(np.intp)
    xi1 = np.clip(x0 + 1, 0, w - 1).astype(np.intp)
    yi0 = np.clip(y0, 0, h - 1).astype(np.intp)
    yi1 = np.clip(y0 + 1, 0, h - 1).astype(np.intp)

    n_idx = np.broadcast_to(np.arange(n, dtype=np.intp)[:, None, None, None],
                            cx.shape)
    v00 = _gather(img, n_idx, yi0, xi0)
    v01 = _gather(img, n_idx, yi0, xi1)
    v10 = _gather(img, n_idx, yi1, xi0)
    v11 = _gather(img, n_idx, yi1, xi1)

    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    values = (top * (1 - fy) + bot * fy) * valid
    cache = (img.shape, n_idx, xi0, xi1, yi0, yi1, fx, fy,
             v00, v01, v10, v11, valid)
    return values, valid, cache


def _bilinear_grad_coords(cache, g):
    _, _, _, _, _, _, fx, fy, v00, v01, v10, v11, valid = cache
    gm = g * valid
    gcx = (gm * ((1 - fy) * (v01 - v00) + fy * (v11 - v10))).sum(axis=1,
                                                                 keepdims=True)
    gcy = (gm * ((1 - fx) * (v10 - v00) + fx * (v11 - v01))).sum(axis=1,
                                                                 keepdims=True)
    return gcx, gcy


def _bilinear_grad_image(cache, g):
    img_shape, n_idx, xi0, xi1, yi0, yi1, fx, fy, *_rest, valid = cache
    gm = g * valid
    gimg = np.zeros(img_shape, dtype=DTYPE)
    for ci in range(img_shape[1]):
        plane = gimg[:, ci]
        np.add.at(plane, (n_idx[:, 0], yi0[:, 0], xi0[:, 0]),
                  gm[:, ci] * ((1 - fx) * (1 - fy))[:, 0])
        np.add.at(plane, (n_idx[:, 0], yi0[:, 0], xi1[:, 0]),
                  gm[:, ci] * (fx * (1 - fy))[:, 0])
        np.add.at(plane, (n_idx[:, 0], yi1[:, 0], xi0[:, 0]),
                  gm[:, ci] * ((1 - fx) * fy)[:, 0])
        np.add.at(plane, (n_idx[:, 0], yi1[:, 0], xi1[:, 0]),
                  gm[:, ci] * (fx * fy)[:, 0])
    return gimg


def sample_bilinear(image, coords_x, coords_y=None):
    """Differentiable bilinear lookup; returns (Var values, bool mask).

    coords_y defaults to the identity row grid (pure horizontal warping).
    Gradients flow to the image and to both coordinate maps.
    """
    img_v = image if isinstance(image, Var) else Var.const(image)
    cx_v = coords_x if isinstance(coords_x, Var) else Var.const(coords_x)
    if coords_y is None:
        coords_y = row_grid(cx_v.data.shape)
    cy_v = coords_y if isinstance(coords_y, Var) else Var.const(coords_y)

    values, mask, cache = _bilinear_forward(img_v.data, cx_v.data, cy_v.data)

    def vjp(g):
        gcx, gcy = _bilinear_grad_coords(cache, g)
        gimg = _bilinear_grad_image(cache, g) if img_v.needs_grad else None
        return (gimg, gcx, gcy)

    out = Var.from_op(values, (img_v, cx_v, cy_v), vjp)
    return out, mask


def reconstruct_view(source, rho, calib: Calib, sign):
    """Warp `source` into the reference view given the reference's inverse depth.

    source/rho are (N,1,H,W) maps (arrays or Vars). Returns (Var, mask) where
    mask marks reference pixels whose warped column stays inside the source.
    """
    rho_v = rho if isinstance(rho, Var) else Var.const(rho)
    if source.shape[-2:] != rho_v.data.shape[-2:]:
        raise ValueError(
            f"source {source.shape} and rho {rho_v.data.shape} spatial sizes differ")
    xgrid = column_grid(rho_v.data.shape)
    coords_x = warp_coord(xgrid, rho_v, calib, sign)
    return sample_bilinear(source, coords_x)


# -- Gaussian smoothing ------------------------------------------------------

def gaussian_kernel(sigma):
    """Normalized 1-D taps truncated at radius ceil(3*sigma)."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    r = math.ceil(3.0 * sigma)
    xs = np.arange(-r, r + 1, dtype=DTYPE)
    taps = np.exp(-0.5 * (xs / sigma) ** 2)
    return taps / taps.sum()


def _smooth_last_axis(x, taps):
    """Correlate the last axis with taps under edge replication."""
    r = (len(taps) - 1) // 2
    n = x.shape[-1]
    pad = [(0, 0)] * (x.ndim - 1) + [(r, r)]
    xp = np.pad(x, pad, mode="edge")
    out = np.zeros_like(x)
    for i, t in enumerate(taps):
        out += t * xp[..., i:i + n]
    return out


def _smooth_last_axis_adjoint(g, taps):
    """Adjoint of _smooth_last_axis: zero-padded correlation, edges folded."""
    r = (len(taps) - 1) // 2
    n = g.shape[-1]
    gxp = np.zeros(g.shape[:-1] + (n + 2 * r,), dtype=g.dtype)
    for i, t in enumerate(taps):
        gxp[..., i:i + n] += t * g
    gx = gxp[..., r:r + n].copy()
    gx[..., 0] += gxp[..., :r].sum(axis=-1)
    gx[..., -1] += gxp[..., n + r:].sum(axis=-1)
    return gx


def _smooth2d(x, taps):
    y = _smooth_last_axis(x, taps)
    y = np.swapaxes(_smooth_last_axis(np.swapaxes(y, -1, -2), taps), -1, -2)
    return y


def _smooth2d_adjoint(g, taps):
    gy = np.swapaxes(_smooth_last_axis_adjoint(np.swapaxes(g, -1, -2), taps),
                     -1, -2)
    return _smooth_last_axis_adjoint(np.ascontiguousarray(gy), taps)


def gaussian_smooth(image, sigma=1.0):
    """Separable Gaussian blur with edge replication; differentiable."""
    taps = gaussian_kernel(sigma)
    img_v = image if isinstance(image, Var) else Var.const(image)
    out_data = _smooth2d(img_v.data, taps)
    return Var.from_op(out_data, (img_v,),
                       lambda g: (_smooth2d_adjoint(g, taps),))


def gaussian_smooth_np(image, sigma=1.0):
    """Forward-only blur for plain arrays."""
    return _smooth2d(np.asarray(image, dtype=DTYPE), gaussian_kernel(sigma))


def resize_bilinear(plane, out_h, out_w):
    """Resize a 2-D array with half-pixel-center bilinear interpolation."""
    plane = np.asarray(plane, dtype=DTYPE)
    h, w = plane.shape
    ys = np.clip((np.arange(out_h, dtype=DTYPE) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w, dtype=DTYPE) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = plane[np.ix_(y0, x0)] * (1 - fx) + plane[np.ix_(y0, x1)] * fx
    bot = plane[np.ix_(y1, x0)] * (1 - fx) + plane[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy
