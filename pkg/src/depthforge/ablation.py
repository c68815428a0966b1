"""Synthetic-benchmark ablation suite: directional comparisons of variants.

Trains the tiny configuration on generated scenes and reports mean test
RMSE per variant over several seeds. The operating point (learning rate,
loss weights, epoch budget) comes from a one-time sweep on this benchmark;
the stock full-scale defaults in TrainConfig are tuned for a pretrained
encoder and do not transfer to from-scratch desk-scale training.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from depthforge import data, evalkit, stereo, trainer
from depthforge.net import NetConfig
from depthforge.trainer import TrainConfig

TINY_NET = NetConfig(base_width=64, blocks_per_stage=(1, 1),
                     width_multiplier=1 / 8, dropout_p=0.0)

# operating point fixed by the benchmark sweep (beta larger than 0.02 left
# the 100%-density supervised transient unstable across seeds)
BENCH_TRAIN = TrainConfig(lr=0.01, momentum=0.9, weight_decay=4e-5,
                          batch_size=4, max_epochs=40, beta=0.02, gamma=2.0,
                          sigma=1.0, early_stop_patience=12)

N_TRAIN = 64
N_VAL = 16
N_TEST = 16


@dataclass(frozen=True)
class Variant:
    name: str
    gt_density: float = 1.0
    gamma: float = BENCH_TRAIN.gamma
    sigma: float = BENCH_TRAIN.sigma


VARIANTS = {
    "semi_full": Variant("semi_full"),
    "semi_1pct": Variant("semi_1pct", gt_density=0.01),
    "sup_only_1pct": Variant("sup_only_1pct", gt_density=0.01, gamma=0.0),
    "semi_50pct": Variant("semi_50pct", gt_density=0.5),
    "no_smoothing": Variant("no_smoothing", sigma=0.0),
}


def make_scenes(count, base_seed, gt_density=1.0, size=(64, 32)):
    cfg = data.SceneConfig(width=size[0], height=size[1], gt_density=gt_density)
    return [data.gen_scene(cfg, seed=base_seed + i) for i in range(count)]


def test_rmse(network, scenes):
    """Mean RMSE of upsampled predictions against dense truth (ablation
    protocol: no crop, no prediction cap, 5 m ground-truth floor)."""
    proto = evalkit.PROTOCOLS["ablation"]
    values = []
    for s in scenes:
        rho = network.forward(s.I_l[None, None], training=False).data[0, 0]
        depth = evalkit.depth_from_rho(
            stereo.resize_bilinear(rho, *s.I_l.shape))
        m = evalkit.evaluate(depth, 1.0 / s.true_rho_l,
                             np.ones(s.I_l.shape, bool), proto)
        values.append(m.rmse)
    return float(np.mean(values))


def run_variant(variant: Variant, seed):
    """One training run; returns (test_rmse, TrainResult)."""
    train_cfg = replace(BENCH_TRAIN, seed=seed, gamma=variant.gamma,
                        sigma=variant.sigma)
    train_scenes = make_scenes(N_TRAIN, 1000 * seed,
                               gt_density=variant.gt_density)
    val_scenes = make_scenes(N_VAL, 1000 * seed + 700,
                             gt_density=variant.gt_density)
    test_scenes = make_scenes(N_TEST, 90000)
    result = trainer.train(train_scenes, val_scenes, TINY_NET, train_cfg)
    return test_rmse(result.net, test_scenes), result


def run_suite(variant_names, seeds=(0, 1, 2), progress=None):
    """Mean test RMSE per variant over the given seeds."""
    means = {}
    for name in variant_names:
        rmses = []
        for seed in seeds:
            rmse, _ = run_variant(VARIANTS[name], seed)
            rmses.append(rmse)
            if progress:
                progress(f"{name} seed {seed}: rmse {rmse:.3f}")
        means[name] = float(np.mean(rmses))
        if progress:
            progress(f"{name}: mean rmse {means[name]:.3f}")
    return means
