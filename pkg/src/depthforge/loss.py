"""The semi-supervised training objective.

Three terms, all differentiable end to end:

  * supervised: berHu penalty on predicted-depth deviation from sparse
    ground truth, with an adaptive threshold set from the current batch;
  * unsupervised: direct photometric alignment of each view against the
    other view warped by the predicted inverse depth, on lightly smoothed
    intensities;
  * regularizer: anisotropic penalty on inverse-depth gradients, relaxed
    where the image itself has strong gradients.

The supervised term is faded in over training steps; the total is
fade_weight * supervised + gamma * unsupervised + regularizer.

Both stereo views enter every term symmetrically: swapping the views while
flipping the warp sign convention (`ref_sign`) leaves all values unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from depthforge import stereo
from depthforge.autodiff import Var, fwd_diff_h, fwd_diff_w, select
from depthforge.ndtensor import DTYPE

# berHu threshold as a fraction of the worst batch residual
DELTA_FRACTION = 0.2
DELTA_MIN = 1e-6

# inverse-depth floor guarding the 1/rho conversion (numeric safety only;
# the network's positivity map already keeps rho > 0)
RHO_FLOOR = 1e-6

# the anisotropic weights expect 0..255 intensity units; images are stored
# in [0,1] and rescaled here so eta keeps its conventional value
ETA = 1.0 / 255.0
INTENSITY_SCALE = 255.0


@dataclass(frozen=True)
class LossWeights:
    """Trade-off parameters: beta fades into the supervised weight over steps."""

    beta: float
    gamma: float
    t: int

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.t < 1:
            raise ValueError("step counter starts at 1")


@dataclass(frozen=True)
class LossBreakdown:
    supervised: float
    unsupervised: float
    regularizer: float
    lambda_t: float
    gamma: float
    total: float

    def is_finite(self):
        return all(np.isfinite(v) for v in
                   (self.supervised, self.unsupervised, self.regularizer, self.total))


@dataclass
class BatchInputs:
    """One training batch at the loss resolution, NCHW float64.

    Z maps are dense arrays paired with boolean masks of the pixels that
    actually carry ground truth.
    """

    I_l: np.ndarray
    I_r: np.ndarray
    Z_l: np.ndarray
    mask_Zl: np.ndarray
    Z_r: np.ndarray
    mask_Zr: np.ndarray
    calib: stereo.Calib


def fade_in_weight(t, beta):
    """Supervised-loss weight at step t: beta * exp(-10/t), increasing to beta."""
    if t < 1:
        raise ValueError(f"step counter must be >= 1, got {t}")
    return beta * float(np.exp(-10.0 / t))


def berhu(d, delta):
    """Reverse Huber: |d| up to delta, then (d^2 + delta^2) / (2 delta).

    Continuous and C1 at |d| = delta; the gradient at the knee takes the
    linear branch (both branches agree there anyway).
    """
    if delta <= 0:
        raise ValueError(f"berhu threshold must be positive, got {delta}")
    if isinstance(d, Var):
        a = d.abs()
        quad = (d.square() + delta * delta) * (1.0 / (2.0 * delta))
        return select(a.data <= delta, a, quad)
    d = np.asarray(d, dtype=DTYPE)
    a = np.abs(d)
    out = np.where(a <= delta, a, (d * d + delta * delta) / (2.0 * delta))
    return float(out) if out.ndim == 0 else out


def adaptive_delta_from_residuals(residuals):
    """Threshold = DELTA_FRACTION * max |residual|, floored to stay usable."""
    residuals = np.asarray(residuals, dtype=DTYPE)
    if residuals.size == 0:
        raise ValueError("adaptive threshold needs at least one residual")
    return max(DELTA_FRACTION * float(np.max(np.abs(residuals))), DELTA_MIN)


def adaptive_delta(pred_depth, gt_depth, gt_mask):
    """Adaptive berHu threshold over the ground-truth pixels of one view."""
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if not gt_mask.any():
        raise ValueError("no ground-truth pixels available")
    return adaptive_delta_from_residuals(pred_depth[gt_mask] - gt_depth[gt_mask])


def _predicted_depth(rho: Var):
    return rho.maximum(RHO_FLOOR).reciprocal()


def supervised_loss(rho_l: Var, rho_r: Var, Z_l, mask_l, Z_r, mask_r,
                    normalize=True, delta=None):
    """berHu on predicted depth vs. sparse truth, both views pooled.

    The adaptive threshold is computed over both views' residuals and
    treated as a constant (no gradient through the max); pass `delta` to
    pin it, e.g. for finite-difference checks against the tape gradient.
    """
    mask_l = np.asarray(mask_l, dtype=bool)
    mask_r = np.asarray(mask_r, dtype=bool)
    count = int(mask_l.sum()) + int(mask_r.sum())
    if count == 0:
        raise ValueError("supervised loss needs ground truth in at least one view")

    depth_l = _predicted_depth(rho_l)
    depth_r = _predicted_depth(rho_r)
    resid_l = depth_l - Z_l
    resid_r = depth_r - Z_r

    if delta is None:
        pooled = np.concatenate([resid_l.data[mask_l].ravel(),
                                 resid_r.data[mask_r].ravel()])
        delta = adaptive_delta_from_residuals(pooled)

    total = (berhu(resid_l, delta) * mask_l).sum() \
        + (berhu(resid_r, delta) * mask_r).sum()
    if normalize:
        total = total * (1.0 / count)
    return total


def alignment_residuals(I_l, I_r, rho_l: Var, rho_r: Var, calib, sigma=1.0,
                        ref_sign=1):
    """Per-pixel photometric residuals of both warp directions.

    Returns (resid_l, valid_l, resid_r, valid_r); residual Vars are already
    zeroed outside the validity masks. sigma <= 0 disables smoothing.
    """
    if sigma and sigma > 0:
        S_l = stereo.gaussian_smooth_np(I_l, sigma)
        S_r = stereo.gaussian_smooth_np(I_r, sigma)
    else:
        S_l, S_r = np.asarray(I_l, dtype=DTYPE), np.asarray(I_r, dtype=DTYPE)

    rec_l, valid_l = stereo.reconstruct_view(S_r, rho_l, calib, ref_sign)
    rec_r, valid_r = stereo.reconstruct_view(S_l, rho_r, calib, -ref_sign)
    resid_l = (rec_l - S_l).abs() * valid_l
    resid_r = (rec_r - S_r).abs() * valid_r
    return resid_l, valid_l, resid_r, valid_r


def unsupervised_loss(I_l, I_r, rho_l: Var, rho_r: Var, calib, sigma=1.0,
                      normalize=True, exclude_l=None, exclude_r=None,
                      ref_sign=1):
    """Direct image-alignment error in both directions.

    exclude_l/exclude_r optionally drop pixels (e.g. those with ground
    truth) from the evaluated sets. Empty valid sets contribute zero.
    """
    resid_l, valid_l, resid_r, valid_r = alignment_residuals(
        I_l, I_r, rho_l, rho_r, calib, sigma, ref_sign)
    keep_l = valid_l if exclude_l is None else valid_l & ~np.asarray(exclude_l, bool)
    keep_r = valid_r if exclude_r is None else valid_r & ~np.asarray(exclude_r, bool)
    count = int(keep_l.sum()) + int(keep_r.sum())
    if count == 0:
        return Var.const(0.0)
    total = (resid_l * keep_l).sum() + (resid_r * keep_r).sum()
    if normalize:
        total = total * (1.0 / count)
    return total


def _edge_weights(image):
    """exp(-eta |dI|) per axis, with intensities rescaled to 0..255 units."""
    image = np.asarray(image, dtype=DTYPE)
    gx = np.zeros_like(image)
    gx[..., :-1] = image[..., 1:] - image[..., :-1]
    gy = np.zeros_like(image)
    gy[..., :-1, :] = image[..., 1:, :] - image[..., :-1, :]
    wx = np.exp(-ETA * np.abs(gx * INTENSITY_SCALE))
    wy = np.exp(-ETA * np.abs(gy * INTENSITY_SCALE))
    return wx, wy


def regularization_loss(I_l, I_r, rho_l: Var, rho_r: Var, normalize=True):
    """|edge-weighted inner product of image and inverse-depth gradients|.

    Forward differences with a zero last row/column; penalizes depth change
    where the image is flat, relaxes it across intensity edges.
    """
    total = None
    count = 0
    for image, rho in ((I_l, rho_l), (I_r, rho_r)):
        wx, wy = _edge_weights(image)
        term = (fwd_diff_w(rho) * wx + fwd_diff_h(rho) * wy).abs().sum()
        total = term if total is None else total + term
        count += int(np.asarray(image).size)
    if normalize:
        total = total * (1.0 / count)
    return total


def total_loss(batch: BatchInputs, rho_l: Var, rho_r: Var,
               weights: LossWeights, sigma=1.0, normalize_terms=True,
               unsup_excludes_gt=False, ref_sign=1, frozen_delta=None,
               reg_weight=1.0):
    """Combined objective; returns (LossBreakdown, total Var).

    The supervised term is skipped (reported as 0) only when beta == 0 and
    no ground truth exists; with beta > 0 missing ground truth is an error.
    reg_weight is a diagnostics knob (isolating terms in tests); the
    combined objective itself always weighs the regularizer at 1.
    """
    lam = fade_in_weight(weights.t, weights.beta)

    have_gt = bool(np.any(batch.mask_Zl)) or bool(np.any(batch.mask_Zr))
    if weights.beta == 0 and not have_gt:
        sup = Var.const(0.0)
    else:
        sup = supervised_loss(rho_l, rho_r, batch.Z_l, batch.mask_Zl,
                              batch.Z_r, batch.mask_Zr,
                              normalize=normalize_terms, delta=frozen_delta)

    unsup = unsupervised_loss(
        batch.I_l, batch.I_r, rho_l, rho_r, batch.calib, sigma=sigma,
        normalize=normalize_terms,
        exclude_l=batch.mask_Zl if unsup_excludes_gt else None,
        exclude_r=batch.mask_Zr if unsup_excludes_gt else None,
        ref_sign=ref_sign)

    reg = regularization_loss(batch.I_l, batch.I_r, rho_l, rho_r,
                              normalize=normalize_terms)

    total = sup * lam + unsup * weights.gamma + reg * reg_weight
    breakdown = LossBreakdown(
        supervised=sup.item(), unsupervised=unsup.item(),
        regularizer=reg.item() * reg_weight, lambda_t=lam, gamma=weights.gamma,
        total=total.item())
    return breakdown, total
