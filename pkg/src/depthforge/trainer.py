"""SGD-with-momentum training under the semi-supervised objective.

Each step: photometric augmentation, one shared-weight forward over both
stereo views (stacked into a single batch so normalization statistics are
view-symmetric), the combined loss at prediction resolution, backward, and
a momentum update with weight decay on convolution weights only.

After every epoch the validation loss (eval mode, fade-in weight frozen at
the current step) decides early stopping; the parameters with the lowest
validation loss are the ones returned.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from depthforge import autodiff, data, loss as loss_mod
from depthforge.loss import BatchInputs, LossBreakdown, LossWeights
from depthforge.ndtensor import NumericalError
from depthforge.net import Network, NetConfig

LOG_COLUMNS = ("epoch", "t", "lambda_t", "L_S", "L_U", "L_R", "total",
               "val_total", "lr")
LOG_HEADER_NOTE = ("# val_total: combined objective on the validation set, "
                   "eval mode, supervised term at its asymptotic weight beta "
                   "so epochs are comparable")

# step count standing in for t -> infinity when weighting validation losses
VALIDATION_T = 10 ** 12


class DivergenceError(RuntimeError):
    def __init__(self, iteration, breakdown: LossBreakdown | None):
        self.iteration = iteration
        self.breakdown = breakdown
        super().__init__(f"non-finite loss at iteration {iteration}: {breakdown}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 4e-5
    batch_size: int = 4
    max_epochs: int = 20
    beta: float = 1.0
    gamma: float = 0.5
    sigma: float = 1.0
    seed: int = 0
    unsup_excludes_gt: bool = False
    normalize_terms: bool = True
    early_stop_patience: int = 3
    augment: bool = True
    reg_weight: float = 1.0  # diagnostics knob; the objective itself uses 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


@dataclass
class TrainState:
    t: int = 0
    velocity: dict = field(default_factory=dict)
    best_val: float = np.inf
    epochs_since_improvement: int = 0


def sgd_step(params, grads, state: TrainState, cfg: TrainConfig,
             decay_names=()):
    """v <- momentum*v + (g + wd*theta); theta <- theta - lr*v; t <- t+1.

    Weight decay applies only to the names in decay_names (convolution
    weights); biases and normalization scales/offsets are exempt.
    """
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise KeyError(f"parameter/gradient key mismatch: {sorted(missing)[:5]}")
    decay = set(decay_names)
    for name, p in params.items():
        g = grads[name]
        if cfg.weight_decay and name in decay:
            g = g + cfg.weight_decay * p.data
        v = state.velocity.get(name)
        v = g if v is None else cfg.momentum * v + g
        state.velocity[name] = v
        p.data = p.data - cfg.lr * v
    state.t += 1


def _stack_views(samples):
    """Full-res input stack (2B,1,H,W) and the half-res loss batch."""
    full = np.stack([np.concatenate([s.I_l[None], s.I_r[None]])
                     for s in samples])  # (B, 2, H, W)
    inputs = np.concatenate([full[:, 0], full[:, 1]])[:, None]  # (2B,1,H,W)

    views = [data.training_view(s) for s in samples]
    batch = BatchInputs(
        I_l=np.stack([v[0] for v in views])[:, None],
        I_r=np.stack([v[1] for v in views])[:, None],
        Z_l=np.stack([v[2] for v in views])[:, None],
        mask_Zl=np.stack([v[3] for v in views])[:, None],
        Z_r=np.stack([v[4] for v in views])[:, None],
        mask_Zr=np.stack([v[5] for v in views])[:, None],
        calib=views[0][6])
    return inputs, batch


def _batch_loss(net: Network, samples, cfg: TrainConfig, t, training, rng):
    inputs, batch = _stack_views(samples)
    b = len(samples)
    rho = net.forward(inputs, training=training, rng=rng)
    rho_l, rho_r = rho[:b], rho[b:]
    weights = LossWeights(beta=cfg.beta, gamma=cfg.gamma, t=max(t, 1))
    return loss_mod.total_loss(
        batch, rho_l, rho_r, weights, sigma=cfg.sigma,
        normalize_terms=cfg.normalize_terms,
        unsup_excludes_gt=cfg.unsup_excludes_gt,
        reg_weight=cfg.reg_weight)


@dataclass
class TrainResult:
    net: Network
    state: TrainState
    log: list
    best_val: float
    stopped_early: bool


def _snapshot(net: Network):
    return ({k: v.data.copy() for k, v in net.params.items()},
            copy.deepcopy(net.bn_states))


def _restore(net: Network, snap):
    params, bn = snap
    for k, v in params.items():
        net.params[k].data = v.copy()
    for k, st in bn.items():
        dst = net.bn_states[k]
        dst.running_mean = st.running_mean.copy()
        dst.running_var = st.running_var.copy()
        dst.updates = st.updates


def train(dataset, val_dataset, net_cfg: NetConfig, train_cfg: TrainConfig,
          net: Network | None = None, initial_t: int = 0,
          log_path=None) -> TrainResult:
    """Run epochs of shuffled minibatches until early stop or max_epochs.

    `net`/`initial_t` allow resuming from a checkpoint with a continuous
    step counter. Returns the network restored to its best-validation
    parameters together with the per-epoch log rows.
    """
    if not dataset or not val_dataset:
        raise ValueError("train and validation datasets must be nonempty")
    if net is None:
        net = Network(net_cfg, seed=train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed + 1)
    state = TrainState(t=initial_t)
    decay_names = net.weight_decay_names()

    log_rows = []
    best_snap = None
    stopped_early = False

    for epoch in range(1, train_cfg.max_epochs + 1):
        order = rng.permutation(len(dataset))
        sums = np.zeros(4)
        nsteps = 0
        lam = 0.0
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            if train_cfg.augment:
                samples = [data.augment(dataset[i], rng.integers(2 ** 63))
                           for i in idx]
            else:
                samples = [dataset[i] for i in idx]
            try:
                breakdown, total = _batch_loss(net, samples, train_cfg,
                                               state.t + 1, True, rng)
                if not breakdown.is_finite():
                    raise DivergenceError(state.t + 1, breakdown)
                autodiff.zero_grads(net.params)
                grads = autodiff.backward(total, net.params)
            except NumericalError as exc:
                raise DivergenceError(state.t + 1, None) from exc
            sgd_step(net.params, grads, state, train_cfg, decay_names)
            sums += (breakdown.supervised, breakdown.unsupervised,
                     breakdown.regularizer, breakdown.total)
            lam = breakdown.lambda_t
            nsteps += 1

        try:
            val_total = validation_loss(net, val_dataset, train_cfg)
        except NumericalError as exc:
            raise DivergenceError(state.t, None) from exc
        if not np.isfinite(val_total):
            raise DivergenceError(state.t, None)

        means = sums / max(nsteps, 1)
        log_rows.append({
            "epoch": epoch, "t": state.t, "lambda_t": lam,
            "L_S": means[0], "L_U": means[1], "L_R": means[2],
            "total": means[3], "val_total": val_total, "lr": train_cfg.lr,
        })

        if val_total < state.best_val:
            state.best_val = val_total
            state.epochs_since_improvement = 0
            best_snap = _snapshot(net)
        else:
            state.epochs_since_improvement += 1
            if state.epochs_since_improvement >= train_cfg.early_stop_patience:
                stopped_early = True
                break

    if best_snap is not None:
        _restore(net, best_snap)
    if log_path is not None:
        write_log(log_path, log_rows)
    return TrainResult(net=net, state=state, log=log_rows,
                       best_val=state.best_val, stopped_early=stopped_early)


def validation_loss(net: Network, val_dataset, cfg: TrainConfig):
    """Mean combined objective over validation batches, eval-mode forward.

    The supervised term enters at its asymptotic weight (fade-in complete),
    so validation values are comparable across epochs.
    """
    totals = []
    counts = []
    for start in range(0, len(val_dataset), cfg.batch_size):
        chunk = val_dataset[start:start + cfg.batch_size]
        breakdown, _ = _batch_loss(net, chunk, cfg, VALIDATION_T, False, None)
        totals.append(breakdown.total * len(chunk))
        counts.append(len(chunk))
    return float(np.sum(totals) / np.sum(counts))


def format_log_value(v):
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def write_log(path, rows):
    with open(path, "w") as fp:
        fp.write(LOG_HEADER_NOTE + "\n")
        fp.write(",".join(LOG_COLUMNS) + "\n")
        for row in rows:
            fp.write(",".join(format_log_value(row[c]) for c in LOG_COLUMNS) + "\n")
