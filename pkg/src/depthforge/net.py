"""Residual encoder-decoder predicting inverse depth at half input resolution.

Encoder: a strided 7x7 stem, 3x3/2 max pooling, then stages of bottleneck
blocks (1x1 -> 3x3 -> 1x1, 4x channel expansion); stage k (k >= 2) halves
resolution, so the bottleneck sits at scale 2^(S+1) for S stages. Decoder:
one upprojection per stage (unpool by 2 + a channel-halving residual block
with a 5x5 main convolution), then a 3x3 head mapped through softplus so
inverse depth stays nonnegative. Long skips feed each stage-final encoder
output into the same-scale upprojection input, merged by concatenation and
a 1x1 convolution.

Every convolution is followed by batch norm except the head; ReLU follows
each normalized convolution except the pre-sum inputs of residual blocks,
where it is applied after the sum.

All spatial ops use the same-ceil rule, and each unpool output is cropped
to ceil(input_extent / scale) so skip shapes align for any input size.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from depthforge import autodiff, ndtensor
from depthforge.autodiff import Var
from depthforge.ndtensor import DTYPE, BNState, ConvSpec, ceil_div

# fresh networks should predict essentially zero inverse depth
INIT_RHO = 5e-4
HEAD_WEIGHT_SCALE = 1e-3

CHECKPOINT_MAGIC = b"DFCHK01\n"


@dataclass(frozen=True)
class NetConfig:
    """Width/depth-scaled variant of the full architecture.

    width_multiplier scales every channel count; blocks_per_stage sets the
    encoder depth (one decoder upprojection per stage). Defaults mirror the
    full-scale layout; desk-scale runs use small multipliers and fewer
    stages.
    """

    base_width: int = 64
    blocks_per_stage: tuple = (3, 4, 6, 3)
    width_multiplier: float = 1.0
    use_long_skips: bool = True
    dropout_p: float = 0.5
    in_channels: int = 1

    def __post_init__(self):
        if not 0 < self.width_multiplier <= 1:
            raise ValueError("width_multiplier must be in (0, 1]")
        if not self.blocks_per_stage or any(b < 1 for b in self.blocks_per_stage):
            raise ValueError("blocks_per_stage must be nonempty positive counts")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")
        w = self.base_width * self.width_multiplier
        if abs(w - round(w)) > 1e-9 or round(w) < 1:
            raise ValueError(
                f"base_width * width_multiplier must be a positive integer, got {w}")
        object.__setattr__(self, "blocks_per_stage", tuple(self.blocks_per_stage))

    @property
    def stem_width(self):
        return int(round(self.base_width * self.width_multiplier))

    @property
    def num_stages(self):
        return len(self.blocks_per_stage)

    @property
    def min_input_extent(self):
        """Smallest H/W keeping the bottleneck meaningful (its scale)."""
        return 2 ** (self.num_stages + 1)

    def stage_widths(self):
        """(narrow, out) channel counts per stage."""
        return [(self.stem_width * 2 ** i, 4 * self.stem_width * 2 ** i)
                for i in range(self.num_stages)]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["blocks_per_stage"] = tuple(d["blocks_per_stage"])
        return cls(**d)


def glorot_bound(cin, cout, k):
    fan_in = cin * k * k
    fan_out = cout * k * k
    return math.sqrt(6.0 / (fan_in + fan_out))


def softplus_inverse(y):
    return math.log(math.expm1(y))


class ParamStore:
    """Ordered registry of trainable Vars and batch-norm running stats."""

    def __init__(self, rng):
        self.rng = rng
        self.params: dict[str, Var] = {}
        self.bn_states: dict[str, BNState] = {}

    def add_conv(self, name, spec: ConvSpec, weight_scale=1.0, bias_value=None):
        """Register a convolution; bias_value None means no bias parameter.

        Convolutions followed by batch norm are bias-free (the per-channel
        offset is exactly absorbed by the normalization), matching the
        residual-architecture convention; only the prediction head carries
        a bias.
        """
        bound = glorot_bound(spec.in_channels, spec.out_channels, spec.kernel)
        w = self.rng.uniform(-bound, bound,
                             size=(spec.out_channels, spec.in_channels,
                                   spec.kernel, spec.kernel)) * weight_scale
        self.params[f"{name}.w"] = Var.param(w, name=f"{name}.w")
        if bias_value is not None:
            b = np.full(spec.out_channels, bias_value, dtype=DTYPE)
            self.params[f"{name}.b"] = Var.param(b, name=f"{name}.b")
        return spec

    def add_bn(self, name, channels):
        self.params[f"{name}.gamma"] = Var.param(np.ones(channels, dtype=DTYPE),
                                                 name=f"{name}.gamma")
        self.params[f"{name}.beta"] = Var.param(np.zeros(channels, dtype=DTYPE),
                                                name=f"{name}.beta")
        self.bn_states[name] = BNState.for_channels(channels)

    def conv(self, name, x, spec, training):
        del training
        bias = self.params.get(f"{name}.b")
        if bias is None:
            bias = Var.const(np.zeros(spec.out_channels, dtype=DTYPE))
        return autodiff.conv2d(x, self.params[f"{name}.w"], bias, spec)

    def bn(self, name, x, training):
        return autodiff.batch_norm(x, self.params[f"{name}.gamma"],
                                   self.params[f"{name}.beta"],
                                   self.bn_states[name], training)


class ConvBN:
    """Convolution + batch norm, optional ReLU."""

    def __init__(self, store: ParamStore, name, spec: ConvSpec, relu=True,
                 weight_scale=1.0):
        self.store = store
        self.name = name
        self.spec = spec
        self.relu = relu
        store.add_conv(name, spec, weight_scale=weight_scale)
        store.add_bn(f"{name}.bn", spec.out_channels)

    def forward(self, x, training):
        y = self.store.conv(self.name, x, self.spec, training)
        y = self.store.bn(f"{self.name}.bn", y, training)
        return y.relu() if self.relu else y


class Bottleneck:
    """Residual block: 1x1 -> 3x3 -> 1x1 with 4x expansion.

    kind 1 keeps shape (identity shortcut); kind 2 projects the shortcut
    with a strided 1x1 convolution and is required whenever the stride or
    channel count changes.
    """

    def __init__(self, store, name, kind, stride, in_ch, out_ch):
        if kind not in (1, 2):
            raise ValueError("residual block kind must be 1 or 2")
        if kind == 1 and (stride != 1 or in_ch != out_ch):
            raise ValueError(
                f"kind-1 block cannot change shape (stride={stride}, "
                f"{in_ch}->{out_ch})")
        if out_ch % 4:
            raise ValueError("bottleneck output channels must be divisible by 4")
        narrow = out_ch // 4
        self.kind = kind
        self.a = ConvBN(store, f"{name}.a", ConvSpec(1, stride, in_ch, narrow))
        self.b = ConvBN(store, f"{name}.b", ConvSpec(3, 1, narrow, narrow))
        self.c = ConvBN(store, f"{name}.c", ConvSpec(1, 1, narrow, out_ch),
                        relu=False)
        self.proj = None
        if kind == 2:
            self.proj = ConvBN(store, f"{name}.proj",
                               ConvSpec(1, stride, in_ch, out_ch), relu=False)

    def forward(self, x, training):
        r = self.c.forward(self.b.forward(self.a.forward(x, training), training),
                           training)
        shortcut = self.proj.forward(x, training) if self.proj else x
        return (r + shortcut).relu()


class UpProject:
    """Unpool by 2 then a channel-halving residual block (5x5 main conv).

    With a skip source, the inputs are concatenated and reduced by a 1x1
    merge convolution first; without long skips the merge convolution still
    exists and sees only the decoder feature, so zeroing the skip columns
    of a skip-enabled network reproduces the no-skip one exactly.
    """

    def __init__(self, store, name, in_ch, skip_ch=0):
        if in_ch % 2:
            raise ValueError(f"upprojection input channels must be even, got {in_ch}")
        out_ch = in_ch // 2
        self.in_ch, self.skip_ch, self.out_ch = in_ch, skip_ch, out_ch
        self.merge = ConvBN(store, f"{name}.merge",
                            ConvSpec(1, 1, in_ch + skip_ch, in_ch))
        self.main1 = ConvBN(store, f"{name}.main1", ConvSpec(5, 1, in_ch, out_ch))
        self.main2 = ConvBN(store, f"{name}.main2", ConvSpec(3, 1, out_ch, out_ch),
                            relu=False)
        self.proj = ConvBN(store, f"{name}.proj", ConvSpec(5, 1, in_ch, out_ch),
                           relu=False)

    def forward(self, x, training, skip=None, target_hw=None):
        if skip is not None:
            x = autodiff.concat([x, skip], axis=1)
        x = self.merge.forward(x, training)
        x = autodiff.unpool2x(x)
        if target_hw is not None:
            th, tw = target_hw
            if x.data.shape[2] != th or x.data.shape[3] != tw:
                x = x[:, :, :th, :tw]
        r = self.main2.forward(self.main1.forward(x, training), training)
        return (r + self.proj.forward(x, training)).relu()


def init_params(network: "Network", seed):
    """Re-seed every parameter and running statistic in place.

    Two calls with the same seed yield identical parameters; returns the
    parameter store.
    """
    fresh = Network(network.cfg, seed=seed)
    for name, p in network.params.items():
        p.data = fresh.params[name].data
    for name, st in network.bn_states.items():
        src = fresh.bn_states[name]
        st.running_mean = src.running_mean
        st.running_var = src.running_var
        st.updates = src.updates
    network.seed = seed
    return network.params


def build_resblock(store, name, kind, stride, in_ch, out_ch):
    return Bottleneck(store, name, kind, stride, in_ch, out_ch)


def build_upproject(store, name, in_ch, skip_ch=0):
    return UpProject(store, name, in_ch, skip_ch)


class Network:
    """The full encoder-decoder with its parameter store."""

    def __init__(self, cfg: NetConfig, seed=0):
        self.cfg = cfg
        self.seed = seed
        store = ParamStore(np.random.default_rng(seed))
        self.store = store

        c1 = cfg.stem_width
        self.conv1 = ConvBN(store, "conv1", ConvSpec(7, 2, cfg.in_channels, c1))

        self.stages = []
        in_ch = c1
        for i, nblocks in enumerate(cfg.blocks_per_stage):
            _, out_ch = cfg.stage_widths()[i]
            stride = 1 if i == 0 else 2
            blocks = [Bottleneck(store, f"stage{i + 1}.block1", 2, stride,
                                 in_ch, out_ch)]
            for j in range(1, nblocks):
                blocks.append(Bottleneck(store, f"stage{i + 1}.block{j + 1}",
                                         1, 1, out_ch, out_ch))
            self.stages.append(blocks)
            in_ch = out_ch

        mid_ch = in_ch // 2
        self.conv2 = ConvBN(store, "conv2", ConvSpec(1, 1, in_ch, mid_ch))

        self.ups = []
        dec_ch = mid_ch
        s = cfg.num_stages
        for k in range(1, s + 1):
            skip_ch = 0
            if k >= 2 and cfg.use_long_skips:
                skip_ch = cfg.stage_widths()[s - k][1]
            self.ups.append(UpProject(store, f"up{k}", dec_ch, skip_ch))
            dec_ch //= 2

        self.conv3_spec = ConvSpec(3, 1, dec_ch, 1)
        store.add_conv("conv3", self.conv3_spec,
                       weight_scale=HEAD_WEIGHT_SCALE,
                       bias_value=softplus_inverse(INIT_RHO))

    @property
    def params(self):
        return self.store.params

    @property
    def bn_states(self):
        return self.store.bn_states

    def weight_decay_names(self):
        """Convolution weights only: biases and BN scales/offsets are exempt."""
        return [n for n in self.params if n.endswith(".w")]

    def forward(self, image, training=False, rng=None):
        """Predict inverse depth (N,1,ceil(H/2),ceil(W/2)) from (N,C,H,W)."""
        x = image if isinstance(image, Var) else Var.const(image)
        n, c, h, w = x.data.shape
        if c != self.cfg.in_channels:
            raise ndtensor.ShapeError(
                f"expected {self.cfg.in_channels} input channels, got {c}")
        minext = self.cfg.min_input_extent
        if h < minext or w < minext:
            raise ValueError(
                f"input {h}x{w} too small; minimum extent is {minext}x{minext}")

        s = self.cfg.num_stages
        target = {k: (ceil_div(h, 2 ** k), ceil_div(w, 2 ** k))
                  for k in range(1, s + 2)}

        y = self.conv1.forward(x, training)
        y = autodiff.max_pool2d(y, 3, 2)
        skips = []
        for blocks in self.stages:
            for block in blocks:
                y = block.forward(y, training)
            skips.append(y)
        self._bottleneck_hw = y.data.shape[2:]

        y = self.conv2.forward(y, training)
        for k, up in enumerate(self.ups, start=1):
            skip = None
            if k >= 2 and self.cfg.use_long_skips:
                skip = skips[s - k]
            y = up.forward(y, training, skip=skip, target_hw=target[s + 1 - k])

        if training and self.cfg.dropout_p > 0:
            if rng is None:
                raise ValueError("training-mode forward with dropout needs an rng")
            keep = (rng.random(y.data.shape) >= self.cfg.dropout_p)
            y = y * (keep / (1.0 - self.cfg.dropout_p))

        z = self.store.conv("conv3", y, self.conv3_spec, training)
        return z.softplus()


# -- checkpoints -------------------------------------------------------------

def _state_entries(net: Network):
    entries = []
    for name, p in net.params.items():
        entries.append((name, "param", p.data))
    for name, st in net.bn_states.items():
        entries.append((f"{name}.running_mean", "buffer", st.running_mean))
        entries.append((f"{name}.running_var", "buffer", st.running_var))
        entries.append((f"{name}.updates", "buffer",
                        np.array([float(st.updates)])))
    return entries


def save_checkpoint(net: Network, path, iteration, seed):
    """Manifest (layer names, shapes, config, seed, step) + tensor blobs."""
    entries = _state_entries(net)
    manifest = {
        "format": 1,
        "net_config": net.cfg.to_dict(),
        "iteration": int(iteration),
        "seed": int(seed),
        "entries": [{"name": n, "kind": k, "shape": list(a.shape)}
                    for n, k, a in entries],
    }
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    blob = json.dumps(manifest, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for _, _, arr in entries:
        ndtensor.write_tensor(buf, arr)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fp:
        fp.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Rebuild the network from a checkpoint; returns (net, iteration, seed)."""
    with open(path, "rb") as fp:
        magic = fp.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (length,) = struct.unpack("<I", fp.read(4))
        manifest = json.loads(fp.read(length))
        cfg = NetConfig.from_dict(manifest["net_config"])
        net = Network(cfg, seed=manifest["seed"])
        for entry in manifest["entries"]:
            arr = ndtensor.read_tensor(fp)
            if list(arr.shape) != entry["shape"]:
                raise ValueError(f"checkpoint entry {entry['name']} shape mismatch")
            name, kind = entry["name"], entry["kind"]
            if kind == "param":
                net.params[name].data = arr
            else:
                base, leaf = name.rsplit(".", 1)
                st = net.bn_states[base]
                if leaf == "running_mean":
                    st.running_mean = arr
                elif leaf == "running_var":
                    st.running_var = arr
                else:
                    st.updates = int(arr.item())
    return net, manifest["iteration"], manifest["seed"]
