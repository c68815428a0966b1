"""Metric definitions vs. a scalar-loop oracle; protocol selection rules."""

import math

import numpy as np
import pytest

from depthforge import evalkit
from depthforge.evalkit import (Metrics, apply_protocol, compute_metrics,
                                evaluate, get_protocol, metrics_csv_row)


def metrics_oracle(pred, gt):
    """Independent scalar-loop restatement of every metric."""
    t = len(pred)
    se = sle = ard = srd = 0.0
    acc = [0, 0, 0]
    for p, z in zip(pred, gt):
        se += (p - z) ** 2
        sle += (math.log(p) - math.log(z)) ** 2
        ard += abs(p - z) / z
        srd += (p - z) ** 2 / z
        ratio = max(p / z, z / p)
        for k in range(3):
            if ratio < 1.25 ** (k + 1):
                acc[k] += 1
    return Metrics(rmse=math.sqrt(se / t), rmse_log=math.sqrt(sle / t),
                   ard=ard / t, srd=srd / t,
                   acc_1=acc[0] / t, acc_2=acc[1] / t, acc_3=acc[2] / t,
                   count=t)


class TestComputeMetrics:
    def test_perfect_prediction(self):
        z = np.array([1.0, 5.0, 30.0])
        m = compute_metrics(z, z)
        assert m.rmse == m.rmse_log == m.ard == m.srd == 0.0
        assert m.acc_1 == m.acc_2 == m.acc_3 == 1.0

    def test_ratio_two_fails_all_thresholds(self):
        # max ratio is 2 in both pairs; 1.25^3 = 1.953125 < 2
        m = compute_metrics([2.0, 1.0], [1.0, 2.0])
        assert m.acc_1 == 0.0
        assert m.acc_2 == 0.0
        assert m.acc_3 == 0.0

    def test_single_pair_hand_values(self):
        m = compute_metrics([3.0], [1.0])
        assert m.rmse == pytest.approx(2.0)
        assert m.ard == pytest.approx(2.0)
        assert m.srd == pytest.approx(4.0)

    def test_accuracy_strictly_less_than_threshold(self):
        m = compute_metrics([1.25], [1.0])
        assert m.acc_1 == 0.0  # ratio == 1.25 exactly, strict <
        assert m.acc_2 == 1.0

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_scalar_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = rng.integers(1, 1000)
        gt = rng.uniform(0.5, 80.0, n)
        pred = gt * rng.uniform(0.4, 2.5, n)
        m = compute_metrics(pred, gt)
        o = metrics_oracle(pred.tolist(), gt.tolist())
        for a, b in zip(m.as_tuple(), o.as_tuple()):
            assert a == pytest.approx(b, abs=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        gt = rng.uniform(1, 50, 100)
        pred = gt * rng.uniform(0.5, 2.0, 100)
        perm = rng.permutation(100)
        a = compute_metrics(pred, gt)
        b = compute_metrics(pred[perm], gt[perm])
        assert a.as_tuple() == pytest.approx(b.as_tuple(), abs=1e-14)

    def test_joint_scaling_behavior(self):
        rng = np.random.default_rng(4)
        gt = rng.uniform(1, 40, 200)
        pred = gt * rng.uniform(0.6, 1.6, 200)
        c = 3.7
        a = compute_metrics(pred, gt)
        b = compute_metrics(c * pred, c * gt)
        assert b.rmse == pytest.approx(c * a.rmse, rel=1e-12)
        assert b.srd == pytest.approx(c * a.srd, rel=1e-12)
        assert b.rmse_log == pytest.approx(a.rmse_log, rel=1e-12)
        assert b.ard == pytest.approx(a.ard, rel=1e-12)
        assert b.acc_1 == a.acc_1 and b.acc_3 == a.acc_3

    def test_accuracy_thresholds_monotone(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            gt = rng.uniform(1, 60, 50)
            pred = gt * rng.uniform(0.3, 3.0, 50)
            m = compute_metrics(pred, gt)
            assert m.acc_1 <= m.acc_2 <= m.acc_3 <= 1.0

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            compute_metrics([1.0, -2.0], [1.0, 1.0])
        with pytest.raises(ValueError, match="nonempty"):
            compute_metrics([], [])


class TestProtocols:
    def test_unknown_name_lists_available(self):
        with pytest.raises(KeyError, match="ablation"):
            get_protocol("bogus")

    def test_garg_clamps_low_predictions(self):
        pred = np.array([[0.4, 10.0]])
        gt = np.array([[2.0, 10.0]])
        mask = np.ones((1, 2), bool)
        proto = get_protocol("garg50", crop=(0.0, 1.0, 0.0, 1.0))
        p, z = apply_protocol(pred, gt, mask, proto)
        assert p[0] == pytest.approx(1.0)
        assert p[1] == pytest.approx(10.0)

    def test_garg_clamp_then_compare_gives_zero_rmse(self):
        pred = np.full((2, 2), 0.5)
        gt = np.full((2, 2), 1.0)
        proto = get_protocol("garg50", crop=(0.0, 1.0, 0.0, 1.0))
        m = evaluate(pred, gt, np.ones((2, 2), bool), proto)
        assert m.rmse == 0.0

    def test_eigen_excludes_far_gt_and_caps_predictions(self):
        pred = np.array([[95.0, 60.0]])
        gt = np.array([[92.0, 70.0]])
        mask = np.ones((1, 2), bool)
        proto = get_protocol("eigen80", crop=(0.0, 1.0, 0.0, 1.0))
        p, z = apply_protocol(pred, gt, mask, proto)
        assert list(z) == [70.0]  # the 92 m pixel is excluded
        assert list(p) == [60.0]
        p2, _ = apply_protocol(np.array([[95.0]]), np.array([[70.0]]),
                               np.array([[True]]), proto)
        assert p2[0] == pytest.approx(80.0)  # capped, not excluded

    def test_ablation_floor_excludes_four_meters(self):
        pred = np.array([[4.0, 6.0]])
        gt = np.array([[4.0, 5.0]])
        mask = np.ones((1, 2), bool)
        p, z = apply_protocol(pred, gt, mask, get_protocol("ablation"))
        assert list(z) == [5.0]
        assert list(p) == [6.0]  # no prediction cap under ablation

    def test_crop_restricts_pixels(self):
        h, w = 10, 10
        pred = np.full((h, w), 5.0)
        gt = np.full((h, w), 5.0)
        mask = np.ones((h, w), bool)
        proto = evalkit.Protocol("half", 0.0, 80.0, None,
                                 (0.5, 1.0, 0.0, 1.0))
        _, z = apply_protocol(pred, gt, mask, proto)
        assert z.size == 50

    def test_empty_survivors_rejected(self):
        with pytest.raises(ValueError, match="survive"):
            apply_protocol(np.ones((2, 2)), np.full((2, 2), 90.0),
                           np.ones((2, 2), bool), evalkit.PROTOCOLS["eigen80"])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="differ"):
            apply_protocol(np.ones((2, 2)), np.ones((2, 3)),
                           np.ones((2, 3), bool), evalkit.PROTOCOLS["ablation"])


class TestOutput:
    def test_csv_row_layout(self):
        m = compute_metrics([2.0], [1.0])
        row = metrics_csv_row(m)
        assert evalkit.CSV_HEADER == "rmse,rmse_log,ard,srd,acc1,acc2,acc3"
        assert len(row.split(",")) == 7
        assert row.split(",")[0] == "1.000000"

    def test_depth_from_rho_caps(self):
        rho = np.array([0.0, 1e-9, 0.5])
        depth = evalkit.depth_from_rho(rho)
        assert depth[0] == depth[1] == pytest.approx(evalkit.DEPTH_MAX_M)
        assert depth[2] == pytest.approx(2.0)
