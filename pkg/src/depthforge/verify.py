"""Self-contained verification suites behind `depthforge verify`.

Each check re-derives its expected values independently (nested-loop
oracles, closed-form evaluations, finite differences) and returns a
pass/fail with a one-line detail. Fault injection replaces a production
function with a deliberately broken variant so the suites can demonstrate
they catch real defects.
"""

from __future__ import annotations

import contextlib
import math
import time

import numpy as np

from depthforge import autodiff, data, evalkit, loss, ndtensor, net, stereo, trainer
from depthforge.autodiff import Var

FAULTS = ("warp-sign", "berhu-branch", "drop-weight-decay")


@contextlib.contextmanager
def inject_fault(name):
    """Temporarily replace a production function with a broken one."""
    if name is None:
        yield
        return
    if name == "warp-sign":
        original = stereo.warp_coord

        def flipped(x_col, rho, calib, sign):
            return original(x_col, rho, calib, -sign)
        stereo.warp_coord = flipped
        try:
            yield
        finally:
            stereo.warp_coord = original
    elif name == "berhu-branch":
        original = loss.berhu

        def swapped(d, delta):
            if delta <= 0:
                raise ValueError("berhu threshold must be positive")
            if isinstance(d, Var):
                a = d.abs()
                quad = (d.square() + delta * delta) * (1.0 / (2.0 * delta))
                return autodiff.select(a.data <= delta, quad, a)
            d = np.asarray(d, dtype=np.float64)
            a = np.abs(d)
            out = np.where(a <= delta, (d * d + delta * delta) / (2 * delta), a)
            return float(out) if out.ndim == 0 else out
        loss.berhu = swapped
        try:
            yield
        finally:
            loss.berhu = original
    elif name == "drop-weight-decay":
        original = trainer.sgd_step

        def no_decay(params, grads, state, cfg, decay_names=()):
            return original(params, grads, state, cfg, decay_names=())
        trainer.sgd_step = no_decay
        try:
            yield
        finally:
            trainer.sgd_step = original
    else:
        raise ValueError(f"unknown fault {name!r}; available: {', '.join(FAULTS)}")


# -- individual checks -------------------------------------------------------

def _conv_oracle(x, w, b, stride):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    oh, ow = math.ceil(h / stride), math.ceil(wd / stride)
    pt = max(0, (oh - 1) * stride + k - h) // 2
    pl = max(0, (ow - 1) * stride + k - wd) // 2
    out = np.zeros((n, cout, oh, ow))
    for ni in range(n):
        for co in range(cout):
            for oy in range(oh):
                for ox in range(ow):
                    acc = b[co]
                    for ci in range(cin):
                        for i in range(k):
                            for j in range(k):
                                iy, ix = oy * stride - pt + i, ox * stride - pl + j
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc += w[co, ci, i, j] * x[ni, ci, iy, ix]
                    out[ni, co, oy, ox] = acc
    return out


def check_conv_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for k, stride in ((3, 1), (3, 2), (5, 2), (1, 1)):
        x = rng.normal(size=(1, 2, 6, 7))
        w = rng.normal(size=(2, 2, k, k))
        b = rng.normal(size=2)
        got = ndtensor.conv2d(x, w, b, ndtensor.ConvSpec(k, stride, 2, 2))
        worst = max(worst, float(np.abs(got - _conv_oracle(x, w, b, stride)).max()))
    return worst < 1e-10, f"convolution vs nested-loop oracle, max |err| {worst:.2e}"


def check_shape_rule():
    for extent in range(1, 34):
        for stride in (1, 2, 3):
            out = ndtensor.ceil_div(extent, stride)
            spec = ndtensor.ConvSpec(3, stride, 1, 1)
            y = ndtensor.conv2d(np.ones((1, 1, extent, extent)),
                                np.ones((1, 1, 3, 3)), np.zeros(1), spec)
            if y.shape[2] != out:
                return False, f"extent {extent} stride {stride}: {y.shape[2]} != {out}"
    return True, "output extent = ceil(E/s) for E in 1..33, s in 1..3"


def check_primitive_gradients():
    rng = np.random.default_rng(1)
    x = Var.param(rng.normal(size=(2, 2, 5, 5)), name="x")
    w = Var.param(rng.normal(size=(3, 2, 3, 3)), name="w")
    b = Var.param(rng.normal(size=3), name="b")
    spec = ndtensor.ConvSpec(3, 2, 2, 3)
    mix = rng.normal(size=(2, 3, 3, 3))

    def f():
        return (autodiff.conv2d(x, w, b, spec) * mix).sum()
    report = autodiff.grad_check(f, {"x": x, "w": w, "b": b}, eps=1e-5, tol=1e-6)
    return report.passed, f"conv2d gradcheck max rel err {report.max_rel_err:.2e}"


def check_sampling_gradients():
    rng = np.random.default_rng(2)
    img = Var.param(rng.random((1, 1, 5, 8)), name="img")
    cx = Var.param(stereo.column_grid((1, 1, 5, 8)) - 0.43, name="cx")
    mix = rng.normal(size=(1, 1, 5, 8))

    def f():
        out, _ = stereo.sample_bilinear(img, cx)
        return (out * mix).sum()
    report = autodiff.grad_check(f, {"img": img, "cx": cx}, eps=1e-5, tol=1e-6)
    return report.passed, f"bilinear-sampling gradcheck max rel err {report.max_rel_err:.2e}"


def check_warp_examples():
    c = stereo.Calib(100.0, 1.0)
    got = stereo.warp_coord(50.0, 0.02, c, 1)
    if abs(got - 48.0) > 1e-12:
        return False, f"warp of column 50 at fb=100, rho=0.02 gave {got}, want 48"
    sym = stereo.warp_coord(31.0, 0.07, c, -1) - stereo.warp_coord(31.0, -0.07, c, 1)
    if abs(sym) > 1e-12:
        return False, "sign flip does not match negated inverse depth"
    return True, "warp coordinate evaluation and sign symmetry"


def check_warp_round_trip():
    sample = data.gen_scene(data.SceneConfig(), seed=12)
    rec, valid = stereo.reconstruct_view(sample.I_r[None, None],
                                         sample.true_rho_l[None, None],
                                         sample.calib, 1)
    keep = valid[0, 0] & sample.nonocc_l
    err = float(np.abs(rec.data[0, 0] - sample.I_l)[keep].max())
    return err < 1e-6, f"scene round trip through true inverse depth, max |err| {err:.2e}"


def check_alignment_well_posedness(n_scenes=3):
    for seed in range(n_scenes):
        sample = data.gen_scene(data.SceneConfig(), seed=seed)
        at_truth, perturbed = alignment_probe(sample, factors=(0.9, 1.1))
        if not (at_truth < 1e-6):
            return False, f"scene {seed}: residual at truth {at_truth:.2e}"
        for factor, value in perturbed.items():
            if value < 10 * max(at_truth, 1e-16):
                return False, (f"scene {seed}: residual at {factor} x truth "
                               f"only {value:.2e} vs {at_truth:.2e}")
    return True, f"alignment sharp at truth on {n_scenes} scenes (>=10x margin)"


def alignment_probe(sample, factors=(0.9, 1.1)):
    """Mean |photometric residual| at true inverse depth and scaled variants,
    restricted to the generator's strict oracle mask."""
    I_l = sample.I_l[None, None]
    I_r = sample.I_r[None, None]

    def masked_mean(factor):
        rho_l = Var.const(sample.true_rho_l[None, None] * factor)
        rho_r = Var.const(sample.true_rho_r[None, None] * factor)
        res_l, val_l, res_r, val_r = loss.alignment_residuals(
            I_l, I_r, rho_l, rho_r, sample.calib, sigma=1.0)
        keep_l = val_l[0, 0] & sample.oracle_l
        keep_r = val_r[0, 0] & sample.oracle_r
        total = res_l.data[0, 0][keep_l].sum() + res_r.data[0, 0][keep_r].sum()
        count = int(keep_l.sum()) + int(keep_r.sum())
        return total / max(count, 1)

    return masked_mean(1.0), {f: masked_mean(f) for f in factors}


def check_berhu_properties():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        delta = rng.uniform(1e-2, 5.0)
        d = rng.uniform(-4 * delta, 4 * delta)
        v = loss.berhu(d, delta)
        if v < abs(d) - 1e-12:
            return False, f"berhu({d:.3f}, {delta:.3f}) = {v:.6f} below |d|"
        if abs(d) <= delta and abs(v - abs(d)) > 1e-12:
            return False, f"berhu not |d| inside threshold at d={d:.4f}"
        if abs(d) > delta and not v > abs(d):
            return False, f"berhu not above |d| outside threshold at d={d:.4f}"
        h = 1e-7 * delta
        left = (loss.berhu(delta, delta) - loss.berhu(delta - h, delta)) / h
        right = (loss.berhu(delta + h, delta) - loss.berhu(delta, delta)) / h
        if abs(left - right) > 1e-6:
            return False, f"berhu kink slopes differ: {left:.8f} vs {right:.8f}"
    hand = loss.berhu(2.0, 1.0)
    if abs(hand - 2.5) > 1e-12:
        return False, f"berhu(2, 1) = {hand}, want 2.5"
    return True, "berhu: 1000 random property cases plus hand values"


def check_metric_oracle(n_sets=10):
    rng = np.random.default_rng(4)
    for _ in range(n_sets):
        n = int(rng.integers(1, 500))
        gt = rng.uniform(0.5, 80.0, n)
        pred = gt * rng.uniform(0.4, 2.5, n)
        m = evalkit.compute_metrics(pred, gt)
        # scalar-loop oracle
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
        for a, b in zip(m.as_tuple(), want):
            if abs(a - b) > 1e-12:
                return False, f"metric mismatch: {m.as_tuple()} vs {want}"
    garg = evalkit.get_protocol("garg50", crop=(0, 1, 0, 1))
    p, _ = evalkit.apply_protocol(np.array([[0.4]]), np.array([[2.0]]),
                                  np.array([[True]]), garg)
    if p[0] != 1.0:
        return False, "garg50 clamp of 0.4 m prediction to 1 m failed"
    abl = evalkit.get_protocol("ablation")
    try:
        evalkit.apply_protocol(np.array([[5.0]]), np.array([[4.0]]),
                               np.array([[True]]), abl)
        return False, "ablation protocol kept a 4 m ground-truth pixel"
    except ValueError:
        pass
    return True, f"metrics vs scalar-loop oracle on {n_sets} random pair sets"


def check_schedule():
    for t in (1, 10, 100):
        want = 2.0 * math.exp(-10.0 / t)
        got = loss.fade_in_weight(t, 2.0)
        if abs(got - want) > 1e-12:
            return False, f"fade-in weight at t={t}: {got} vs {want}"
    prev = 0.0
    for t in range(1, 100001, 111):
        v = loss.fade_in_weight(t, 1.0)
        if v < prev:
            return False, f"fade-in weight decreased at t={t}"
        prev = v
    return True, "fade-in weight matches closed form and is nondecreasing"


def check_sgd_recurrence():
    cfg = trainer.TrainConfig(lr=0.1, momentum=0.9, weight_decay=0.01,
                              max_epochs=1)
    p = Var.param(np.array([1.0]), name="w")
    state = trainer.TrainState()
    g = np.array([0.5])
    trainer.sgd_step({"w": p}, {"w": g.copy()}, state, cfg, decay_names=["w"])
    # v1 = g + wd*theta0; theta1 = theta0 - lr*v1
    v1 = 0.5 + 0.01 * 1.0
    want1 = 1.0 - 0.1 * v1
    if abs(p.data[0] - want1) > 1e-12:
        return False, f"first update gave {p.data[0]:.9f}, want {want1:.9f}"
    trainer.sgd_step({"w": p}, {"w": g.copy()}, state, cfg, decay_names=["w"])
    v2 = 0.9 * v1 + (0.5 + 0.01 * want1)
    want2 = want1 - 0.1 * v2
    if abs(p.data[0] - want2) > 1e-12:
        return False, f"second update gave {p.data[0]:.9f}, want {want2:.9f}"
    if state.t != 2:
        return False, f"step counter at {state.t}, want 2"
    # decay must shrink parameters under zero gradients
    q = Var.param(np.array([2.0]), name="w")
    st = trainer.TrainState()
    trainer.sgd_step({"w": q}, {"w": np.zeros(1)}, st,
                     trainer.TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.5,
                                         max_epochs=1), decay_names=["w"])
    if not q.data[0] < 2.0:
        return False, "weight decay failed to shrink a zero-gradient parameter"
    return True, "momentum/weight-decay recurrence matches closed form"


def check_full_loss_gradient():
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
    weights = loss.LossWeights(beta=1.0, gamma=0.5, t=50)

    rho0 = network.forward(inputs, training=True)
    delta = loss.adaptive_delta_from_residuals(np.concatenate([
        (1 / np.maximum(rho0.data[:1], loss.RHO_FLOOR) - batch.Z_l)[batch.mask_Zl],
        (1 / np.maximum(rho0.data[1:], loss.RHO_FLOOR) - batch.Z_r)[batch.mask_Zr]]))

    def f():
        rho = network.forward(inputs, training=True)
        _, total = loss.total_loss(batch, rho[:1], rho[1:], weights,
                                   frozen_delta=delta)
        return total
    # eps balances truncation across downstream ReLU/pool kinks (worse at
    # 1e-3) against double-precision roundoff (worse below 1e-6)
    report = autodiff.grad_check(f, network.params, eps=1e-5, tol=1e-4,
                                 coords_per_param=3, seed=7)
    return report.passed, (f"full-objective gradcheck through tiny net, "
                           f"max rel err {report.max_rel_err:.2e}")


def check_architecture_shapes():
    cfg = net.NetConfig(base_width=64, blocks_per_stage=(1, 1, 1, 1),
                        width_multiplier=1 / 8, dropout_p=0.0)
    rng = np.random.default_rng(8)
    for h, w in ((32, 32), (33, 64), (47, 95), (96, 33)):
        for skips in (True, False):
            c = net.NetConfig(base_width=64, blocks_per_stage=(1, 1, 1, 1),
                              width_multiplier=1 / 8, dropout_p=0.0,
                              use_long_skips=skips)
            network = net.Network(c, seed=9)
            rho = network.forward(rng.random((1, 1, h, w)), training=True)
            want = (math.ceil(h / 2), math.ceil(w / 2))
            if rho.data.shape[2:] != want:
                return False, f"{h}x{w} skips={skips}: {rho.data.shape[2:]} != {want}"
            if network._bottleneck_hw != (math.ceil(h / 32), math.ceil(w / 32)):
                return False, f"bottleneck scale wrong at {h}x{w}"
    del cfg
    return True, "forward output ceil(H/2) x ceil(W/2), bottleneck at scale 32"


def loss_gradient_table():
    """Max relative gradient error per loss term (for the full report)."""
    rng = np.random.default_rng(10)
    shape = (1, 1, 8, 16)
    rho_l = Var.param(rng.uniform(0.08, 0.25, shape), name="rho_l")
    rho_r = Var.param(rng.uniform(0.08, 0.25, shape), name="rho_r")
    I_l = rng.random(shape)
    I_r = rng.random(shape)
    Z = rng.uniform(3, 12, shape)
    mask = rng.random(shape) > 0.5
    calib = stereo.Calib(20.0, 1.0)
    params = {"rho_l": rho_l, "rho_r": rho_r}
    delta = loss.adaptive_delta_from_residuals(
        (1 / rho_l.data - Z)[mask].ravel())

    rows = {}
    rows["supervised"] = autodiff.grad_check(
        lambda: loss.supervised_loss(rho_l, rho_r, Z, mask, Z, mask,
                                     delta=delta),
        params, eps=1e-6, tol=1e-4).max_rel_err
    rows["unsupervised"] = autodiff.grad_check(
        lambda: loss.unsupervised_loss(I_l, I_r, rho_l, rho_r, calib),
        params, eps=1e-6, tol=1e-4).max_rel_err
    rows["regularizer"] = autodiff.grad_check(
        lambda: loss.regularization_loss(I_l, I_r, rho_l, rho_r),
        params, eps=1e-6, tol=1e-4).max_rel_err
    return rows


def check_loss_gradient_table():
    rows = loss_gradient_table()
    lines = [f"    {name:12s} max rel err {err:.3e}" for name, err in rows.items()]
    ok = all(err < 1e-4 for err in rows.values())
    return ok, "per-term gradient errors:\n" + "\n".join(lines)


QUICK_CHECKS = [
    ("conv-oracle", check_conv_oracle),
    ("shape-rule", check_shape_rule),
    ("primitive-gradients", check_primitive_gradients),
    ("sampling-gradients", check_sampling_gradients),
    ("warp-examples", check_warp_examples),
    ("warp-round-trip", check_warp_round_trip),
    ("berhu-properties", check_berhu_properties),
    ("metric-oracle", check_metric_oracle),
    ("schedule", check_schedule),
    ("sgd-recurrence", check_sgd_recurrence),
]

FULL_CHECKS = QUICK_CHECKS + [
    ("alignment-well-posedness", check_alignment_well_posedness),
    ("full-loss-gradient", check_full_loss_gradient),
    ("architecture-shapes", check_architecture_shapes),
    ("loss-gradient-table", check_loss_gradient_table),
    ("metric-oracle-100", lambda: check_metric_oracle(100)),
]


def run_verify(level="quick", fault=None, out=print):
    checks = QUICK_CHECKS if level == "quick" else FULL_CHECKS
    failures = []
    with inject_fault(fault):
        for name, fn in checks:
            start = time.time()
            try:
                ok, detail = fn()
            except Exception as exc:  # a crash is a failure, not an abort
                ok, detail = False, f"raised {type(exc).__name__}: {exc}"
            status = "PASS" if ok else "FAIL"
            out(f"[{status}] {name}: {detail} ({time.time() - start:.1f}s)")
            if not ok:
                failures.append(name)
    if failures:
        out(f"verification failed: {', '.join(failures)}")
        return False
    out(f"all {len(checks)} checks passed")
    return True
