"""Depth evaluation metrics and the named evaluation protocols.

A protocol selects ground-truth pixels (depth range + fractional crop
rectangle) and optionally clamps predictions before the error statistics
are computed. Metrics over the surviving (prediction, truth) pairs:

  rmse      sqrt(mean((p - z)^2))            meters
  rmse_log  same on natural logs
  ard       mean(|p - z| / z)
  srd       mean((p - z)^2 / z)
  acc_k     fraction with max(p/z, z/p) < 1.25^k, k = 1..3 (strict <)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from depthforge.fileio import DEPTH_MAX_M

# fractional (top, bottom, left, right) of the evaluated rectangle; the
# conventional crop used by the eigen80/garg50 protocols, overridable
DEFAULT_CROP = (0.4081, 0.9919, 0.0359, 0.9641)

ACC_BASE = 1.25


@dataclass(frozen=True)
class Protocol:
    name: str
    gt_min: float
    gt_max: float
    pred_clamp: tuple | None = None   # (lo | None, hi | None)
    crop: tuple | None = None         # fractional (top, bottom, left, right)

    def __post_init__(self):
        if not self.gt_min < self.gt_max:
            raise ValueError("gt_min must be below gt_max")
        if self.pred_clamp is not None:
            lo, hi = self.pred_clamp
            if lo is not None and hi is not None and lo > hi:
                raise ValueError("pred_clamp bounds out of order")


PROTOCOLS = {
    "eigen80": Protocol("eigen80", gt_min=0.0, gt_max=80.0,
                        pred_clamp=(None, 80.0), crop=DEFAULT_CROP),
    "garg50": Protocol("garg50", gt_min=1.0, gt_max=50.0,
                       pred_clamp=(1.0, 50.0), crop=DEFAULT_CROP),
    "ablation": Protocol("ablation", gt_min=5.0, gt_max=math.inf,
                         pred_clamp=None, crop=None),
}


def get_protocol(name, crop=None):
    if name not in PROTOCOLS:
        raise KeyError(f"unknown protocol {name!r}; available: "
                       f"{', '.join(sorted(PROTOCOLS))}")
    proto = PROTOCOLS[name]
    if crop is not None and proto.crop is not None:
        proto = Protocol(proto.name, proto.gt_min, proto.gt_max,
                         proto.pred_clamp, tuple(crop))
    return proto


@dataclass(frozen=True)
class Metrics:
    rmse: float
    rmse_log: float
    ard: float
    srd: float
    acc_1: float
    acc_2: float
    acc_3: float
    count: int

    def as_tuple(self):
        return (self.rmse, self.rmse_log, self.ard, self.srd,
                self.acc_1, self.acc_2, self.acc_3)


CSV_HEADER = "rmse,rmse_log,ard,srd,acc1,acc2,acc3"


def metrics_csv_row(m: Metrics):
    return ",".join(f"{v:.6f}" for v in m.as_tuple())


def apply_protocol(pred_depth, gt_depth, gt_mask, protocol: Protocol):
    """Select pixels per protocol; returns paired (pred, gt) value arrays."""
    pred_depth = np.asarray(pred_depth, dtype=np.float64)
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    if pred_depth.shape != gt_depth.shape:
        raise ValueError(
            f"prediction {pred_depth.shape} and truth {gt_depth.shape} differ")
    keep = np.asarray(gt_mask, bool) & (gt_depth >= protocol.gt_min) \
        & (gt_depth <= protocol.gt_max)
    if protocol.crop is not None:
        top, bottom, left, right = protocol.crop
        h, w = gt_depth.shape
        box = np.zeros((h, w), dtype=bool)
        box[int(round(top * h)):int(round(bottom * h)),
            int(round(left * w)):int(round(right * w))] = True
        keep &= box
    if not keep.any():
        raise ValueError(f"no ground-truth pixels survive protocol {protocol.name}")
    pred = pred_depth[keep]
    gt = gt_depth[keep]
    if protocol.pred_clamp is not None:
        lo, hi = protocol.pred_clamp
        if lo is not None:
            pred = np.maximum(pred, lo)
        if hi is not None:
            pred = np.minimum(pred, hi)
    return pred, gt


def compute_metrics(pred, gt) -> Metrics:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if pred.size == 0 or pred.size != gt.size:
        raise ValueError("metrics need a nonempty, equal-length pair set")
    if np.any(pred <= 0) or np.any(gt <= 0):
        raise ValueError("metrics are defined for positive depths only")
    diff = pred - gt
    ratio = np.maximum(pred / gt, gt / pred)
    return Metrics(
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(pred) - np.log(gt)) ** 2))),
        ard=float(np.mean(np.abs(diff) / gt)),
        srd=float(np.mean(diff ** 2 / gt)),
        acc_1=float(np.mean(ratio < ACC_BASE)),
        acc_2=float(np.mean(ratio < ACC_BASE ** 2)),
        acc_3=float(np.mean(ratio < ACC_BASE ** 3)),
        count=int(pred.size))


def evaluate(pred_depth, gt_depth, gt_mask, protocol: Protocol) -> Metrics:
    return compute_metrics(*apply_protocol(pred_depth, gt_depth, gt_mask,
                                           protocol))


def depth_from_rho(rho, cap=DEPTH_MAX_M):
    """Metric depth from inverse depth, capped for storability."""
    return 1.0 / np.maximum(np.asarray(rho, dtype=np.float64), 1.0 / cap)
