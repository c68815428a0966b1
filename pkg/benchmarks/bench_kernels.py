#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-numpy fallback.

Runs the convolution and pooling kernels at the layer shapes the desk-scale
network actually uses, plus one larger shape, and prints a timing table.

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from depthforge import _kernels_np

try:
    from depthforge import _kernels_cy
except ImportError:
    _kernels_cy = None

# (label, n, cin, cout, h, w, k, stride) — drawn from the tiny-net layers
CASES = [
    ("stem 7x7/2", 8, 1, 8, 64, 32, 7, 2),
    ("bottleneck 1x1", 8, 32, 8, 16, 8, 1, 1),
    ("bottleneck 3x3", 8, 8, 8, 16, 8, 3, 1),
    ("upproject 5x5", 8, 16, 8, 32, 16, 5, 1),
    ("head 3x3", 8, 8, 1, 32, 16, 3, 1),
    ("wide 3x3", 4, 32, 32, 64, 64, 3, 1),
]


def _pads(h, w, k, s):
    def one(extent):
        out = -(-extent // s)
        need = max(0, (out - 1) * s + k - extent)
        return need // 2, need - need // 2
    (pt, pb), (pl, pr) = one(h), one(w)
    return pt, pb, pl, pr


def time_fn(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_case(label, n, cin, cout, h, w, k, stride, repeats):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(n, cin, h, w))
    wt = rng.normal(size=(cout, cin, k, k))
    b = rng.normal(size=cout)
    pads = _pads(h, w, k, stride)
    gy = rng.normal(size=_kernels_np.conv2d_forward(x, wt, b, stride, pads).shape)

    rows = []
    for direction, np_fn, cy_fn in (
        ("fwd", lambda: _kernels_np.conv2d_forward(x, wt, b, stride, pads),
         (lambda: _kernels_cy.conv2d_forward(x, wt, b, stride, pads))
         if _kernels_cy else None),
        ("bwd", lambda: _kernels_np.conv2d_backward(x, wt, stride, pads, gy),
         (lambda: _kernels_cy.conv2d_backward(x, wt, stride, pads, gy))
         if _kernels_cy else None),
    ):
        t_np = time_fn(np_fn, repeats)
        t_cy = time_fn(cy_fn, repeats) if cy_fn else float("nan")
        rows.append((f"{label} {direction}", t_np, t_cy))
    return rows


def bench_pool(repeats):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(8, 8, 32, 16))
    pads = _pads(32, 16, 3, 2)
    y, arg = _kernels_np.maxpool_forward(x, 3, 2, pads)
    gy = rng.normal(size=y.shape)
    rows = [("maxpool 3x3/2 fwd",
             time_fn(lambda: _kernels_np.maxpool_forward(x, 3, 2, pads), repeats),
             time_fn(lambda: _kernels_cy.maxpool_forward(x, 3, 2, pads), repeats)
             if _kernels_cy else float("nan")),
            ("maxpool 3x3/2 bwd",
             time_fn(lambda: _kernels_np.maxpool_backward(x.shape, 3, 2, pads,
                                                          arg, gy), repeats),
             time_fn(lambda: _kernels_cy.maxpool_backward(x.shape, 3, 2, pads,
                                                          arg, gy), repeats)
             if _kernels_cy else float("nan"))]
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=30)
    args = parser.parse_args()

    if _kernels_cy is None:
        print("compiled kernels not built; showing numpy fallback only")

    rows = []
    for case in CASES:
        rows.extend(bench_case(*case, repeats=args.repeats))
    rows.extend(bench_pool(args.repeats))

    print(f"{'kernel':24s} {'numpy':>10s} {'native':>10s} {'speedup':>8s}")
    for label, t_np, t_cy in rows:
        speed = t_np / t_cy if t_cy == t_cy else float("nan")
        print(f"{label:24s} {t_np * 1e3:9.3f}ms {t_cy * 1e3:9.3f}ms {speed:7.2f}x")


if __name__ == "__main__":
    main()
