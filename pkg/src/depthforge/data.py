"""Synthetic stereo scenes with exact truth, sparse-GT simulation, dataset IO.

Scenes are stacks of fronto-parallel rectangles, each at constant depth and
carrying a linear intensity ramp anchored in left-view coordinates. Because
the textures are linear, subpixel bilinear lookups are exact, which makes
the photometric-alignment-at-truth oracle sharp instead of approximate.

The right image is rendered analytically: a layer at inverse depth rho
shifts left by f*b*rho pixels; painting far-to-near gives exact occlusion.
Per-view layer-id maps yield dense depth for both views and the
disocclusion masks the round-trip oracles need.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np

from depthforge import fileio
from depthforge.stereo import Calib

IMAGE_LEFT = "image_left.png"
IMAGE_RIGHT = "image_right.png"
DEPTH_LEFT = "depth_left.png"
DEPTH_RIGHT = "depth_right.png"
CALIB_FILE = "calib.txt"
TRUE_RHO = "true_rho.pfm"          # left view
TRUE_RHO_RIGHT = "true_rho_right.pfm"


@dataclass
class StereoSample:
    """One rectified pair: images in [0,1], sparse metric depth, calibration.

    Synthetic samples additionally carry dense true inverse depth and the
    masks used by the warping oracles: nonocc_* marks pixels whose warped
    footprint stays on the same scene layer; oracle_* further requires the
    whole Gaussian-smoothing window to stay on one layer in both views.
    """

    I_l: np.ndarray
    I_r: np.ndarray
    Z_l: np.ndarray
    mask_Zl: np.ndarray
    Z_r: np.ndarray
    mask_Zr: np.ndarray
    calib: Calib
    true_rho_l: np.ndarray | None = None
    true_rho_r: np.ndarray | None = None
    nonocc_l: np.ndarray | None = None
    nonocc_r: np.ndarray | None = None
    oracle_l: np.ndarray | None = None
    oracle_r: np.ndarray | None = None

    def __post_init__(self):
        shapes = {a.shape for a in (self.I_l, self.I_r, self.Z_l, self.Z_r,
                                    self.mask_Zl, self.mask_Zr)}
        if len(shapes) != 1:
            raise ValueError(f"sample planes disagree in shape: {shapes}")
        if np.any(self.Z_l[self.mask_Zl] <= 0) or np.any(self.Z_r[self.mask_Zr] <= 0):
            raise ValueError("ground-truth depth must be positive where valid")

    @property
    def shape(self):
        return self.I_l.shape


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 32
    num_layers: int = 4
    depth_range: tuple = (5.5, 14.0)
    gt_density: float = 1.0
    gt_rows_band: float = 0.6
    focal_px: float = 56.0
    baseline_m: float = 0.8
    smoothing_radius: int = 3  # oracle-mask window radius (ceil(3*sigma))

    def __post_init__(self):
        if not 0 < self.gt_density <= 1:
            raise ValueError("gt_density must be in (0, 1]")
        if not 0 < self.gt_rows_band <= 1:
            raise ValueError("gt_rows_band must be in (0, 1]")
        lo, hi = self.depth_range
        if not (1.0 < lo < hi < 80.0):
            raise ValueError("depth_range must satisfy 1 < near < far < 80 m")
        if self.num_layers < 1:
            raise ValueError("need at least one layer")


@dataclass(frozen=True)
class _Texture:
    """Triangle wave in x plus a gentle ramp in y: piecewise linear with
    image-realistic slopes. Folds (slope sign changes) sit at
    phase + m * period / 2 in left-view coordinates."""

    base: float
    amp: float
    period: float
    phase: float
    by: float

    def eval(self, x, y):
        u = np.mod((x - self.phase) / self.period, 1.0)
        tri = 2.0 * np.minimum(u, 1.0 - u)
        return self.base + self.amp * tri + self.by * y

    def fold_distance(self, x):
        """Distance from x to the nearest slope kink."""
        half = self.period / 2.0
        return np.abs(np.mod(x - self.phase + half / 2.0, half) - half / 2.0)


def _random_texture(rng, h):
    # period long enough that smoothing-radius windows fit between kinks,
    # amplitude high enough for image-realistic slopes (2*amp/period)
    period = rng.uniform(18.0, 26.0)
    amp = rng.uniform(0.25, 0.45)
    phase = rng.uniform(0.0, period)
    by = rng.uniform(0.001, 0.005) * rng.choice([-1.0, 1.0])
    y_span = abs(by) * (h - 1)
    base = rng.uniform(0.03, 0.93 - amp - y_span) + max(0.0, -by * (h - 1))
    return _Texture(base, amp, period, phase, by)


def _uniform_window(id_map, radius):
    """True where every pixel of the (2r+1)^2 window exists and shares the id."""
    h, w = id_map.shape
    ok = np.zeros((h, w), dtype=bool)
    if h <= 2 * radius or w <= 2 * radius:
        return ok
    core = id_map[radius:h - radius, radius:w - radius]
    same = np.ones_like(core, dtype=bool)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            same &= id_map[radius + dy:h - radius + dy,
                           radius + dx:w - radius + dx] == core
    ok[radius:h - radius, radius:w - radius] = same
    return ok


def gen_scene(cfg: SceneConfig, seed) -> StereoSample:
    """Render one stereo pair with exact dense truth and oracle masks."""
    rng = np.random.default_rng(seed)
    w, h = cfg.width, cfg.height
    calib = Calib(cfg.focal_px, cfg.baseline_m)

    near, far = cfg.depth_range
    depths = np.sort(rng.uniform(near, far, size=cfg.num_layers))[::-1].copy()
    disp = calib.fb / depths
    if np.any(disp >= w):
        raise ValueError(
            f"layer shift {disp.max():.1f} px exceeds image width {w}")

    # layer 0 is a full-frame background; the rest are random rectangles
    rects = [(0.0, float(w), 0.0, float(h))]
    for _ in range(1, cfg.num_layers):
        rw = rng.uniform(0.25, 0.6) * w
        rh = rng.uniform(0.3, 0.7) * h
        x0 = rng.uniform(0, w - rw)
        y0 = rng.uniform(0, h - rh)
        rects.append((x0, x0 + rw, y0, y0 + rh))

    textures = [_random_texture(rng, h) for _ in range(cfg.num_layers)]

    cols = np.arange(w, dtype=np.float64)[None, :]
    rows = np.arange(h, dtype=np.float64)[:, None]

    id_l = np.zeros((h, w), dtype=np.int32)
    id_r = np.zeros((h, w), dtype=np.int32)
    for k, (x0, x1, y0, y1) in enumerate(rects):
        in_rows = (rows >= y0) & (rows < y1)
        id_l = np.where(in_rows & (cols >= x0) & (cols < x1), k, id_l)
        id_r = np.where(in_rows & (cols >= x0 - disp[k]) & (cols < x1 - disp[k]),
                        k, id_r)

    def paint(id_map, col_offset_per_layer):
        img = np.zeros((h, w))
        folds = np.zeros((h, w))  # distance to nearest texture kink
        ygrid = np.broadcast_to(rows, (h, w))
        for k, tex in enumerate(textures):
            sel = id_map == k
            if not sel.any():
                continue
            tex_x = (cols + col_offset_per_layer[k])  # texture anchored left
            img[sel] = tex.eval(np.broadcast_to(tex_x, (h, w))[sel], ygrid[sel])
            folds[sel] = tex.fold_distance(np.broadcast_to(tex_x, (h, w))[sel])
        return img, folds

    zero_off = np.zeros(cfg.num_layers)
    I_l, fold_l = paint(id_l, zero_off)
    I_r, fold_r = paint(id_r, disp)

    Z_l = depths[id_l]
    Z_r = depths[id_r]
    rho_l = 1.0 / Z_l
    rho_r = 1.0 / Z_r

    def occlusion_masks(id_ref, id_src, fold_src, fold_ref, signed_disp):
        coord = cols + signed_disp  # warped column per reference pixel
        valid = (coord >= 0) & (coord <= w - 1)
        c0 = np.clip(np.floor(coord), 0, w - 1).astype(np.intp)
        c1 = np.clip(c0 + 1, 0, w - 1)
        rr = np.broadcast_to(np.arange(h)[:, None], (h, w))
        same = (id_src[rr, c0] == id_ref) & (id_src[rr, c1] == id_ref)
        # sampling interpolates between c0 and c1: a texture kink between
        # them breaks linearity, so keep a one-pixel fold margin
        no_kink = (fold_src[rr, c0] > 1.0) & (fold_src[rr, c1] > 1.0)
        nonocc = valid & same & no_kink
        r = cfg.smoothing_radius
        ok_ref = _uniform_window(id_ref, r) & (fold_ref > r + 1)
        ok_src = _uniform_window(id_src, r) & (fold_src > r + 1)
        oracle = nonocc & ok_ref & ok_src[rr, c0] & ok_src[rr, c1]
        return nonocc, oracle

    nonocc_l, oracle_l = occlusion_masks(id_l, id_r, fold_r, fold_l,
                                         -disp[id_l])
    nonocc_r, oracle_r = occlusion_masks(id_r, id_l, fold_l, fold_r,
                                         +disp[id_r])

    sub = np.random.default_rng(rng.integers(2 ** 63))
    mask_Zl = _sparsify_mask(np.ones((h, w), bool), cfg.gt_density,
                             cfg.gt_rows_band, sub)
    mask_Zr = _sparsify_mask(np.ones((h, w), bool), cfg.gt_density,
                             cfg.gt_rows_band, sub)

    return StereoSample(
        I_l=I_l, I_r=I_r, Z_l=Z_l, mask_Zl=mask_Zl, Z_r=Z_r, mask_Zr=mask_Zr,
        calib=calib, true_rho_l=rho_l, true_rho_r=rho_r,
        nonocc_l=nonocc_l, nonocc_r=nonocc_r,
        oracle_l=oracle_l, oracle_r=oracle_r)


def _sparsify_mask(valid, density, rows_band, rng):
    h = valid.shape[0]
    row0 = h - int(round(rows_band * h))
    eligible = valid.copy()
    eligible[:row0] = False
    idx = np.flatnonzero(eligible)
    if idx.size == 0:
        raise ValueError("no eligible ground-truth pixels in the rows band")
    keep = int(round(density * idx.size))
    chosen = rng.choice(idx.size, size=keep, replace=False)
    mask = np.zeros(valid.shape, dtype=bool)
    mask.flat[idx[chosen]] = True
    return mask


def sparsify_gt(depth, valid, density, rows_band, seed):
    """Keep a uniform random subset of valid pixels in the lower rows band.

    Returns (depth, new_mask); kept values are untouched and the new mask is
    a subset of the input mask.
    """
    if not 0 < density <= 1:
        raise ValueError("density must be in (0, 1]")
    rng = np.random.default_rng(seed)
    return depth, _sparsify_mask(np.asarray(valid, bool), density, rows_band, rng)


def augment(sample: StereoSample, seed, alpha_range=(0.8, 1.2),
            gamma_range=(0.8, 1.2)) -> StereoSample:
    """Photometric augmentation: I <- clamp(I**gamma * alpha, 0, 1).

    One draw per sample, applied identically to both views so
    photoconsistency is preserved; depth is untouched.
    """
    if min(alpha_range) <= 0 or min(gamma_range) <= 0:
        raise ValueError("augmentation ranges must be positive")
    rng = np.random.default_rng(seed)
    gamma = rng.uniform(*gamma_range)
    alpha = rng.uniform(*alpha_range)
    warp = lambda img: np.clip(np.power(img, gamma) * alpha, 0.0, 1.0)
    return replace(sample, I_l=warp(sample.I_l), I_r=warp(sample.I_r))


# -- file-backed samples -----------------------------------------------------

def load_kitti_sample(left_path, right_path, depth_l_path, depth_r_path,
                      calib_path) -> StereoSample:
    """Load a sample from image/depth PNG files plus a calib text file."""
    I_l = fileio.read_image(left_path)
    I_r = fileio.read_image(right_path)
    Z_l, mask_l = fileio.read_depth(depth_l_path)
    Z_r, mask_r = fileio.read_depth(depth_r_path)
    f_px, baseline = fileio.read_calib(calib_path)
    if I_l.shape != I_r.shape or I_l.shape != Z_l.shape or Z_l.shape != Z_r.shape:
        raise fileio.FileFormatError(
            f"size mismatch between images and depth maps under "
            f"{os.path.dirname(str(left_path)) or '.'}")
    return StereoSample(I_l=I_l, I_r=I_r, Z_l=Z_l, mask_Zl=mask_l,
                        Z_r=Z_r, mask_Zr=mask_r, calib=Calib(f_px, baseline))


def save_sample_dir(sample: StereoSample, folder):
    os.makedirs(folder, exist_ok=True)
    fileio.write_image(os.path.join(folder, IMAGE_LEFT), sample.I_l)
    fileio.write_image(os.path.join(folder, IMAGE_RIGHT), sample.I_r)
    fileio.write_depth(os.path.join(folder, DEPTH_LEFT), sample.Z_l,
                       sample.mask_Zl)
    fileio.write_depth(os.path.join(folder, DEPTH_RIGHT), sample.Z_r,
                       sample.mask_Zr)
    fileio.write_calib(os.path.join(folder, CALIB_FILE),
                       sample.calib.f, sample.calib.b)
    if sample.true_rho_l is not None:
        fileio.write_pfm(os.path.join(folder, TRUE_RHO), sample.true_rho_l)
    if sample.true_rho_r is not None:
        fileio.write_pfm(os.path.join(folder, TRUE_RHO_RIGHT), sample.true_rho_r)


def load_sample_dir(folder) -> StereoSample:
    sample = load_kitti_sample(
        os.path.join(folder, IMAGE_LEFT), os.path.join(folder, IMAGE_RIGHT),
        os.path.join(folder, DEPTH_LEFT), os.path.join(folder, DEPTH_RIGHT),
        os.path.join(folder, CALIB_FILE))
    rho_path = os.path.join(folder, TRUE_RHO)
    if os.path.exists(rho_path):
        sample.true_rho_l = fileio.read_pfm(rho_path)
    rho_r_path = os.path.join(folder, TRUE_RHO_RIGHT)
    if os.path.exists(rho_r_path):
        sample.true_rho_r = fileio.read_pfm(rho_r_path)
    return sample


def list_sample_dirs(root):
    """Numbered sample folders under root, sorted."""
    if not os.path.isdir(root):
        raise fileio.FileFormatError(f"dataset directory {root} does not exist")
    names = sorted(d for d in os.listdir(root)
                   if os.path.isdir(os.path.join(root, d)) and d.isdigit())
    if not names:
        raise fileio.FileFormatError(f"no numbered sample folders under {root}")
    return [os.path.join(root, d) for d in names]


def load_dataset(root):
    return [load_sample_dir(d) for d in list_sample_dirs(root)]


# -- half-resolution training views -----------------------------------------

def downsample_box2(plane):
    """2x2 box filter to ceil-half size (odd edges replicate)."""
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    if h % 2:
        plane = np.vstack([plane, plane[-1:]])
    if w % 2:
        plane = np.hstack([plane, plane[:, -1:]])
    return 0.25 * (plane[0::2, 0::2] + plane[1::2, 0::2]
                   + plane[0::2, 1::2] + plane[1::2, 1::2])


def gt_to_half(depth, mask):
    """Map sparse GT onto the half-resolution grid (collisions averaged)."""
    h, w = depth.shape
    oh, ow = math.ceil(h / 2), math.ceil(w / 2)
    sums = np.zeros((oh, ow))
    counts = np.zeros((oh, ow))
    ys, xs = np.nonzero(mask)
    np.add.at(sums, (ys // 2, xs // 2), depth[ys, xs])
    np.add.at(counts, (ys // 2, xs // 2), 1.0)
    out_mask = counts > 0
    out = np.zeros((oh, ow))
    out[out_mask] = sums[out_mask] / counts[out_mask]
    return out, out_mask


def training_view(sample: StereoSample):
    """Half-resolution planes matching the network's prediction grid.

    Returns (I_l, I_r, Z_l, mask_l, Z_r, mask_r, calib) with the focal
    length halved to keep disparities consistent.
    """
    I_l = downsample_box2(sample.I_l)
    I_r = downsample_box2(sample.I_r)
    Z_l, m_l = gt_to_half(sample.Z_l, sample.mask_Zl)
    Z_r, m_r = gt_to_half(sample.Z_r, sample.mask_Zr)
    return I_l, I_r, Z_l, m_l, Z_r, m_r, sample.calib.halved()
