"""Acceptance criteria, one test per criterion, printed verdict lines.

Run with `pytest tests/test_acceptance.py -v -s`. Criterion 7 trains
fifteen networks (five variants x three seeds) and takes ~25 minutes
single-core; everything else finishes in a few minutes.
"""

import math
import time

import numpy as np
import pytest

from depthforge import ablation, autodiff, data, evalkit, loss, net, verify
from depthforge.cli import main as cli_main
from depthforge.loss import LossWeights


def report(criterion, passed, detail):
    print(f"[criterion {criterion}] {'PASS' if passed else 'FAIL'}: {detail}")
    assert passed, detail


class TestCriterion1GradientFidelity:
    def test_full_loss_gradcheck_tiny_net(self):
        start = time.time()
        sample = data.gen_scene(data.SceneConfig(width=32, height=16), seed=5)
        cfg = net.NetConfig(base_width=64, blocks_per_stage=(1, 1),
                            width_multiplier=1 / 8, dropout_p=0.0)
        network = net.Network(cfg, seed=6)
        views = data.training_view(sample)
        batch = loss.BatchInputs(
            I_l=views[0][None, None], I_r=views[1][None, None],
            Z_l=views[2][None, None], mask_Zl=views[3][None, None],
            Z_r=views[4][None, None], mask_Zr=views[5][None, None],
            calib=views[6])
        inputs = np.stack([sample.I_l, sample.I_r])[:, None]
        weights = LossWeights(beta=1.0, gamma=0.5, t=50)

        rho0 = network.forward(inputs, training=True)
        delta = loss.adaptive_delta_from_residuals(np.concatenate([
            (1 / np.maximum(rho0.data[:1], loss.RHO_FLOOR)
             - batch.Z_l)[batch.mask_Zl],
            (1 / np.maximum(rho0.data[1:], loss.RHO_FLOOR)
             - batch.Z_r)[batch.mask_Zr]]))

        def f():
            rho = network.forward(inputs, training=True)
            _, total = loss.total_loss(batch, rho[:1], rho[1:], weights,
                                       frozen_delta=delta)
            return total

        # every parameter tensor, six sampled coordinates each; the berHu
        # threshold is frozen because it is detached from the tape by design
        check = autodiff.grad_check(f, network.params, eps=1e-5, tol=1e-4,
                                    coords_per_param=6, seed=7)
        elapsed = time.time() - start
        report(1, check.passed and elapsed < 60.0,
               f"max rel err {check.max_rel_err:.3e} (tol 1e-4) over "
               f"{len(network.params)} parameter tensors in {elapsed:.1f}s")


class TestCriterion2WarpingWellPosedness:
    def test_twenty_scenes_sharp_at_truth(self):
        worst_truth = 0.0
        worst_margin = np.inf
        for seed in range(20):
            sample = data.gen_scene(data.SceneConfig(), seed=seed)
            at_truth, perturbed = verify.alignment_probe(
                sample, factors=(0.9, 1.1))
            worst_truth = max(worst_truth, at_truth)
            if at_truth > 0:
                worst_margin = min(worst_margin,
                                   min(perturbed.values()) / at_truth)
            ok = at_truth < 1e-6 and all(
                v >= 10 * max(at_truth, 1e-300) for v in perturbed.values())
            assert ok, (f"scene {seed}: at truth {at_truth:.3e}, "
                        f"perturbed {perturbed}")
        report(2, True,
               f"20 scenes: residual at truth < {worst_truth:.2e} "
               f"(bound 1e-6), perturbation margin >= {worst_margin:.1e}x "
               f"(bound 10x)")


class TestCriterion3BerhuProperties:
    def test_thousand_random_cases(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            delta = float(rng.uniform(1e-3, 10.0))
            d = float(rng.uniform(-5 * delta, 5 * delta))
            v = loss.berhu(d, delta)
            assert v >= abs(d) - 1e-12
            if abs(d) <= delta:
                assert v == pytest.approx(abs(d), abs=1e-12)
            else:
                assert v > abs(d)
            h = 1e-7 * delta
            # continuity and C1 at the knee
            gap = abs(loss.berhu(delta + h, delta) - loss.berhu(delta - h, delta))
            assert gap < 3 * h + 1e-9
            left = (loss.berhu(delta, delta) - loss.berhu(delta - h, delta)) / h
            right = (loss.berhu(delta + h, delta) - loss.berhu(delta, delta)) / h
            assert abs(left - right) < 1e-6
        report(3, True, "1000 random (d, delta) cases: continuity, C1 knee "
                        "(1e-6), berhu >= |d| with equality iff |d| <= delta")


class TestCriterion4MetricOracle:
    def test_oracle_equivalence_and_protocol_rules(self):
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(1, 1000))
            gt = rng.uniform(0.5, 80.0, n)
            pred = gt * rng.uniform(0.3, 3.0, n)
            m = evalkit.compute_metrics(pred, gt)
            se = sle = ard = srd = 0.0
            acc = [0, 0, 0]
            for p, z in zip(pred, gt):
                se += (p - z) ** 2
                sle += (math.log(p) - math.log(z)) ** 2
                ard += abs(p - z) / z
                srd += (p - z) ** 2 / z
                r = max(p / z, z / p)
                for k in range(3):
                    acc[k] += r < 1.25 ** (k + 1)
            want = (math.sqrt(se / n), math.sqrt(sle / n), ard / n, srd / n,
                    acc[0] / n, acc[1] / n, acc[2] / n)
            worst = max(worst, max(abs(a - b)
                                   for a, b in zip(m.as_tuple(), want)))
        assert worst < 1e-12

        full = (0.0, 1.0, 0.0, 1.0)
        garg = evalkit.get_protocol("garg50", crop=full)
        p, _ = evalkit.apply_protocol(np.array([[0.4, 60.0]]),
                                      np.array([[2.0, 50.0]]),
                                      np.ones((1, 2), bool), garg)
        assert p[0] == 1.0 and p[1] == 50.0
        eigen = evalkit.get_protocol("eigen80", crop=full)
        _, z = evalkit.apply_protocol(np.array([[5.0, 5.0]]),
                                      np.array([[92.0, 70.0]]),
                                      np.ones((1, 2), bool), eigen)
        assert list(z) == [70.0]
        abl = evalkit.PROTOCOLS["ablation"]
        p, z = evalkit.apply_protocol(np.array([[9.0, 9.0, 200.0]]),
                                      np.array([[4.0, 5.0, 60.0]]),
                                      np.ones((1, 3), bool), abl)
        assert list(z) == [5.0, 60.0]      # 4 m excluded by the 5 m floor
        assert list(p) == [9.0, 200.0]     # no prediction cap under ablation
        report(4, True, f"100 pair sets vs scalar-loop oracle "
                        f"(max |err| {worst:.1e}, bound 1e-12); clamp and "
                        f"floor rules reproduced on hand-built cases")


class TestCriterion5Schedule:
    def test_closed_form_and_monotonicity(self):
        beta = 1.7
        worst = 0.0
        for t in (1, 10, 100):
            got = loss.fade_in_weight(t, beta)
            want = beta * math.exp(-10.0 / t)
            worst = max(worst, abs(got - want))
        assert worst < 1e-12
        values = [loss.fade_in_weight(t, beta) for t in range(1, 100001)]
        assert all(a <= b for a, b in zip(values, values[1:]))
        report(5, True, f"fade-in weight at t in {{1,10,100}} matches "
                        f"beta*exp(-10/t) to {worst:.1e} (bound 1e-12); "
                        f"nondecreasing over t = 1..1e5")


class TestCriterion6ArchitectureShapes:
    def test_sixteen_point_grid_with_and_without_skips(self):
        rng = np.random.default_rng(2)
        checked = 0
        for h in (32, 45, 64, 96):
            for w in (33, 47, 80, 96):
                for skips in (True, False):
                    cfg = net.NetConfig(base_width=64,
                                        blocks_per_stage=(1, 1, 1, 1),
                                        width_multiplier=1 / 8,
                                        dropout_p=0.0, use_long_skips=skips)
                    network = net.Network(cfg, seed=3)
                    rho = network.forward(rng.random((1, 1, h, w)),
                                          training=True)
                    assert rho.data.shape == \
                        (1, 1, math.ceil(h / 2), math.ceil(w / 2))
                    assert network._bottleneck_hw == \
                        (math.ceil(h / 32), math.ceil(w / 32))
                    checked += 1
        report(6, True, f"{checked // 2}-point (H, W) grid x skips on/off: "
                        f"output ceil(H/2) x ceil(W/2), bottleneck scale 32")


class TestCriterion7AblationTrends:
    def test_directional_reproduction(self):
        start = time.time()
        means = ablation.run_suite(
            ["semi_full", "semi_1pct", "sup_only_1pct", "semi_50pct",
             "no_smoothing"],
            seeds=(0, 1, 2),
            progress=lambda msg: print(f"    {msg}"))
        elapsed = time.time() - start

        semi_full = means["semi_full"]
        a_ok = means["semi_1pct"] <= means["sup_only_1pct"]
        b_gap = abs(means["semi_50pct"] - semi_full) / semi_full
        c_gain = (semi_full - means["no_smoothing"]) / semi_full
        report(7, a_ok and b_gap <= 0.15 and c_gain <= 0.05 and elapsed < 1800,
               f"(a) semi@1% {means['semi_1pct']:.3f} <= sup-only@1% "
               f"{means['sup_only_1pct']:.3f}: {a_ok}; "
               f"(b) 50%-vs-100% gap {b_gap:.1%} (bound 15%); "
               f"(c) no-smoothing gain {c_gain:.1%} (bound 5%); "
               f"{elapsed / 60:.1f} min (bound 30)")


class TestCriterion8Determinism:
    def test_identical_runs_bitwise(self, tmp_path):
        data_dir = tmp_path / "train"
        val_dir = tmp_path / "val"
        assert cli_main(["gen", "--out", str(data_dir), "--scenes", "6",
                         "--seed", "11"]) == 0
        assert cli_main(["gen", "--out", str(val_dir), "--scenes", "2",
                         "--seed", "77"]) == 0
        cfg = tmp_path / "tiny.cfg"
        cfg.write_text(
            "seed = 4\nmax_epochs = 3\nlr = 0.01\nbeta = 0.02\ngamma = 2.0\n"
            "batch_size = 4\nearly_stop_patience = 5\nbase_width = 64\n"
            "blocks_per_stage = 1,1\nwidth_multiplier = 0.125\n"
            "dropout_p = 0.5\n")
        outs = []
        for run in ("a", "b"):
            out = tmp_path / run
            code = cli_main(["--deterministic", "train",
                             "--data", str(data_dir), "--val", str(val_dir),
                             "--config", str(cfg), "--out", str(out)])
            assert code == 0
            outs.append(out)
        log_a = (outs[0] / "log.csv").read_bytes()
        log_b = (outs[1] / "log.csv").read_bytes()
        ckpt_a = (outs[0] / "best.ckpt").read_bytes()
        ckpt_b = (outs[1] / "best.ckpt").read_bytes()
        report(8, log_a == log_b and ckpt_a == ckpt_b,
               f"two cmd_train runs: logs identical ({log_a == log_b}), "
               f"checkpoints bit-identical ({ckpt_a == ckpt_b})")


class TestCriterion9NegativeControls:
    def test_injected_faults_are_detected(self):
        clean = cli_main(["verify", "--level", "quick"])
        results = {}
        for fault in verify.FAULTS:
            results[fault] = cli_main(["verify", "--level", "quick",
                                       "--inject", fault])
        ok = clean == 0 and all(code == 1 for code in results.values())
        report(9, ok, f"clean verify exit {clean}; injected faults -> exits "
                      f"{results} (want 1 each)")
