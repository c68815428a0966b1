"""Command-line entry point: gen, train, predict, eval, verify.

Exit codes: 0 success, 1 verification failure, 2 usage/input error,
3 numerical divergence.

Heavy imports happen inside the command handlers so that --threads can cap
the BLAS thread pools before numpy loads; DEPTHFORGE_THREADS is the
environment equivalent. --deterministic is accepted everywhere: the
implementation is single-threaded with fixed reduction order, so it simply
pins the thread cap to 1.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3


class UsageError(Exception):
    pass


def _apply_threads(args):
    threads = args.threads or os.environ.get("DEPTHFORGE_THREADS")
    if getattr(args, "deterministic", False):
        threads = 1
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(threads)


def _hash_bytes(*chunks):
    digest = hashlib.sha256()
    for chunk in chunks:
        digest.update(chunk)
    return digest.hexdigest()


def _hash_files(paths):
    digest = hashlib.sha256()
    for path in sorted(str(p) for p in paths):
        digest.update(os.path.basename(path).encode())
        with open(path, "rb") as fp:
            while True:
                block = fp.read(1 << 20)
                if not block:
                    break
                digest.update(block)
    return digest.hexdigest()


def write_manifest(out_dir, command, config, seed, inputs_hash, outputs):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs_hash": inputs_hash,
        "outputs": sorted(outputs),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fp:
        json.dump(manifest, fp, indent=2, sort_keys=True)
        fp.write("\n")
    return path


# -- config files: flat `key = value` lines ----------------------------------

TRAIN_KEYS = {
    "lr": float, "momentum": float, "weight_decay": float, "batch_size": int,
    "max_epochs": int, "beta": float, "gamma": float, "sigma": float,
    "seed": int, "unsup_excludes_gt": bool, "normalize_terms": bool,
    "early_stop_patience": int, "augment": bool,
}
NET_KEYS = {
    "base_width": int, "blocks_per_stage": tuple, "width_multiplier": float,
    "use_long_skips": bool, "dropout_p": float, "in_channels": int,
}
REQUIRED_KEYS = ("seed", "max_epochs")


def _parse_value(kind, raw, key):
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise UsageError(f"config key {key}: expected a boolean, got {raw!r}")
    if kind is tuple:
        try:
            return tuple(int(v) for v in raw.split(","))
        except ValueError as exc:
            raise UsageError(f"config key {key}: {exc}") from exc
    try:
        return kind(raw)
    except ValueError as exc:
        raise UsageError(f"config key {key}: {exc}") from exc


def parse_config_file(path):
    """Returns (train_kwargs, net_kwargs); unknown or missing keys error."""
    if not os.path.exists(path):
        raise UsageError(f"config file {path} does not exist")
    train_kwargs, net_kwargs = {}, {}
    with open(path) as fp:
        for lineno, line in enumerate(fp, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            key = key.strip()
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected `key = value`")
            if key in TRAIN_KEYS:
                train_kwargs[key] = _parse_value(TRAIN_KEYS[key], raw, key)
            elif key in NET_KEYS:
                net_kwargs[key] = _parse_value(NET_KEYS[key], raw, key)
            else:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
    for key in REQUIRED_KEYS:
        if key not in train_kwargs:
            raise UsageError(f"config file {path} is missing required key {key!r}")
    return train_kwargs, net_kwargs


# -- commands -----------------------------------------------------------------

def cmd_gen(args):
    from depthforge import data

    if not 0 < args.gt_density <= 1:
        raise UsageError(f"--gt-density must be in (0, 1], got {args.gt_density}")
    try:
        w, h = (int(v) for v in args.size.lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"--size expects WxH, got {args.size!r}") from exc
    if args.scenes < 1:
        raise UsageError("--scenes must be >= 1")
    try:
        os.makedirs(args.out, exist_ok=True)
        probe = os.path.join(args.out, ".writable")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise UsageError(f"output directory {args.out} is not writable: {exc}")

    cfg = data.SceneConfig(width=w, height=h, gt_density=args.gt_density,
                           gt_rows_band=args.rows_band,
                           depth_range=tuple(args.depth_range))
    outputs = []
    for i in range(args.scenes):
        sample = data.gen_scene(cfg, seed=args.seed + i)
        folder = os.path.join(args.out, f"{i:04d}")
        data.save_sample_dir(sample, folder)
        outputs.append(folder)
    snapshot = {"scenes": args.scenes, "size": args.size,
                "gt_density": args.gt_density, "rows_band": args.rows_band,
                "depth_range": list(args.depth_range)}
    write_manifest(args.out, "gen", snapshot, args.seed,
                   _hash_bytes(json.dumps(snapshot, sort_keys=True).encode(),
                               str(args.seed).encode()), outputs)
    print(f"wrote {args.scenes} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args):
    from depthforge import data, net, trainer

    train_kwargs, net_kwargs = parse_config_file(args.config)
    train_cfg = trainer.TrainConfig(**train_kwargs)
    net_cfg = net.NetConfig(**net_kwargs)

    try:
        dataset = data.load_dataset(args.data)
        val_dataset = data.load_dataset(args.val)
    except Exception as exc:
        raise UsageError(str(exc)) from exc

    os.makedirs(args.out, exist_ok=True)
    network, initial_t = None, 0
    if args.resume:
        network, initial_t, _ = net.load_checkpoint(args.resume)
        if network.cfg != net_cfg:
            raise UsageError("--resume checkpoint config differs from --config")

    log_path = os.path.join(args.out, "log.csv")
    ckpt_path = os.path.join(args.out, "best.ckpt")
    try:
        result = trainer.train(dataset, val_dataset, net_cfg, train_cfg,
                               net=network, initial_t=initial_t,
                               log_path=log_path)
    except trainer.DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        if exc.breakdown is not None:
            print(f"loss breakdown: {exc.breakdown}", file=sys.stderr)
        return EXIT_DIVERGED

    net.save_checkpoint(result.net, ckpt_path, iteration=result.state.t,
                        seed=train_cfg.seed)
    inputs_hash = _hash_files(
        [args.config]
        + [os.path.join(d, f) for d in data.list_sample_dirs(args.data)
           for f in sorted(os.listdir(d))])
    write_manifest(args.out, "train",
                   {"train": train_kwargs, "net": net_kwargs,
                    "data": os.path.abspath(args.data),
                    "val": os.path.abspath(args.val)},
                   train_cfg.seed, inputs_hash, [log_path, ckpt_path])
    last = result.log[-1]
    print(f"finished after {last['epoch']} epochs (t={last['t']}), "
          f"best validation loss {result.best_val:.6f}"
          f"{' (early stop)' if result.stopped_early else ''}")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def cmd_predict(args):
    from depthforge import data, evalkit, fileio, net, stereo

    try:
        network, _, _ = net.load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load checkpoint {args.checkpoint}: {exc}")
    try:
        dirs = data.list_sample_dirs(args.images)
    except Exception as exc:
        raise UsageError(str(exc)) from exc

    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for folder in dirs:
        sample = data.load_sample_dir(folder)
        rho = network.forward(sample.I_l[None, None], training=False).data[0, 0]
        name = os.path.basename(folder)
        target = os.path.join(args.out, name)
        os.makedirs(target, exist_ok=True)
        fileio.write_pfm(os.path.join(target, "rho.pfm"), rho)
        h, w = sample.I_l.shape
        depth = evalkit.depth_from_rho(stereo.resize_bilinear(rho, h, w))
        fileio.write_depth(os.path.join(target, "depth.png"), depth)
        outputs.append(target)
    write_manifest(args.out, "predict",
                   {"checkpoint": os.path.abspath(args.checkpoint),
                    "images": os.path.abspath(args.images)},
                   0, _hash_files([args.checkpoint]), outputs)
    print(f"wrote {len(outputs)} predictions to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    import numpy as np

    from depthforge import data, evalkit, fileio, stereo

    try:
        proto = evalkit.get_protocol(args.protocol, crop=args.crop)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from exc
    try:
        gt_dirs = data.list_sample_dirs(args.gt)
    except Exception as exc:
        raise UsageError(str(exc)) from exc

    preds, gts = [], []
    for folder in gt_dirs:
        name = os.path.basename(folder)
        pred_png = os.path.join(args.pred, name, "depth.png")
        if not os.path.exists(pred_png):
            raise UsageError(f"prediction {pred_png} missing "
                             f"(counts must match the ground-truth set)")
        pred, _ = fileio.read_depth(pred_png)
        gt, mask = fileio.read_depth(os.path.join(folder, data.DEPTH_LEFT))
        if pred.shape != gt.shape:
            pred = stereo.resize_bilinear(pred, *gt.shape)
        p, z = evalkit.apply_protocol(pred, gt, mask, proto)
        preds.append(p)
        gts.append(z)
    metrics = evalkit.compute_metrics(np.concatenate(preds), np.concatenate(gts))
    print(evalkit.CSV_HEADER)
    print(evalkit.metrics_csv_row(metrics))
    return EXIT_OK


def cmd_verify(args):
    from depthforge import verify

    if args.inject is not None and args.inject not in verify.FAULTS:
        raise UsageError(f"unknown fault {args.inject!r}; "
                         f"available: {', '.join(verify.FAULTS)}")
    ok = verify.run_verify(level=args.level, fault=args.inject)
    return EXIT_OK if ok else EXIT_VERIFY_FAILED


def build_parser():
    parser = argparse.ArgumentParser(
        prog="depthforge",
        description="Semi-supervised stereo depth learning at desk scale")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap worker/BLAS threads (env: DEPTHFORGE_THREADS)")
    parser.add_argument("--deterministic", action="store_true",
                        help="force reproducible reductions (single thread)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic stereo dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--size", default="64x32", help="WxH (default 64x32)")
    p.add_argument("--gt-density", type=float, default=1.0)
    p.add_argument("--rows-band", type=float, default=0.6)
    p.add_argument("--depth-range", type=float, nargs=2,
                   default=(5.5, 14.0), metavar=("NEAR", "FAR"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train from a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="predict inverse depth for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("eval", help="compare predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--protocol", required=True,
                   help="eigen80 | garg50 | ablation")
    p.add_argument("--crop", type=float, nargs=4, default=None,
                   metavar=("TOP", "BOTTOM", "LEFT", "RIGHT"),
                   help="override the fractional evaluation rectangle")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify", help="run the oracle suites")
    p.add_argument("--level", choices=("quick", "full"), default="quick")
    p.add_argument("--inject", default=None,
                   help="inject a named fault (negative-control testing)")
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_threads(args)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
