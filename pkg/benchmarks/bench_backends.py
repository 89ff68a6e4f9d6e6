#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy twins.

Runs each hot kernel at training-like shapes on both backends and prints a
table of per-call times plus the speedup. Also times one full flow NLL
step (forward + backward) end to end through each backend.

Usage: python benchmarks/bench_backends.py [--repeats 50]
"""

import argparse
import time

import numpy as np

from poselift import backend
from poselift.backend import backend_module, use_backend
from poselift.flow import FlowModel, nll_loss_and_grads


def timeit(fn, repeats):
    fn()  # warmup (JIT compile / cache load)
    best = float("inf")
    for _ in range(max(3, repeats // 10)):
        t0 = time.perf_counter()
        for _ in range(repeats):
            fn()
        best = min(best, (time.perf_counter() - t0) / repeats)
    return best


def kernel_cases(rng):
    n, din, dout = 512, 1024, 1024
    x = rng.standard_normal((n, din))
    W = rng.standard_normal((dout, din))
    b = rng.standard_normal(dout)
    dy = rng.standard_normal((n, dout))
    y_relu = np.maximum(x @ W.T + b, 0)

    xu = rng.standard_normal((n, 16))
    s = 0.5 * rng.standard_normal((n, 16))
    t = rng.standard_normal((n, 16))
    exp_s = np.exp(s)
    dld = rng.standard_normal(n)

    p = rng.standard_normal(din * dout)
    g = rng.standard_normal(din * dout)
    m = np.zeros_like(p)
    v = np.zeros_like(p)

    pts = rng.standard_normal((n, 17, 3)) + (0, 0, 10)
    R = np.linalg.qr(rng.standard_normal((n, 3, 3)))[0]
    gp = rng.standard_normal((n, 17, 3))

    return [
        ("dense_relu_fwd (512x1024x1024)", lambda k: k.dense_relu_fwd(x, W, b)),
        ("dense_bwd      (512x1024x1024)", lambda k: k.dense_bwd(x, W, dy)),
        ("relu_bwd       (512x1024)", lambda k: k.relu_bwd(y_relu, dy)),
        ("adam_update    (1M params)", lambda k: k.adam_update(p, g, m, v, 3,
                                                               1e-3, 0.9, 0.999, 1e-8)),
        ("soft_cap_fwd   (512x16)", lambda k: k.soft_cap_fwd(s, 1.5)),
        ("affine_fwd     (512x16)", lambda k: k.affine_fwd(xu, s, t)),
        ("affine_bwd     (512x16)", lambda k: k.affine_bwd(xu, exp_s, xu, dld)),
        ("rotate_about   (512x17)", lambda k: k.rotate_about(pts, R, 0, False)),
        ("rotate_bwd     (512x17)", lambda k: k.rotate_about_bwd(pts, R, 0, False, gp)),
    ]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=30)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    npk = backend_module("numpy")
    nbk = backend_module("numba")

    print(f"{'kernel':<34} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    print("-" * 66)
    for name, call in kernel_cases(rng):
        t_np = timeit(lambda: call(npk), args.repeats)
        t_nb = timeit(lambda: call(nbk), args.repeats)
        print(f"{name:<34} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms "
              f"{t_np / t_nb:>7.2f}x")

    # end-to-end: one flow NLL step (forward + backward), both backends
    flow = FlowModel.init(rng, 32, width=1024)
    for p in flow.params():
        p += 0.01 * rng.standard_normal(p.shape)
    rows = rng.standard_normal((512, 32))
    prev = backend.active_backend()
    try:
        results = {}
        for name in ("numpy", "numba"):
            use_backend(name)
            results[name] = timeit(lambda: nll_loss_and_grads(flow, rows, 256),
                                   max(5, args.repeats // 5))
    finally:
        use_backend(prev)
    print("-" * 66)
    print(f"{'flow NLL fwd+bwd (512x32, 8 blk)':<34} "
          f"{results['numpy'] * 1e3:>8.2f}ms {results['numba'] * 1e3:>8.2f}ms "
          f"{results['numpy'] / results['numba']:>7.2f}x")


if __name__ == "__main__":
    main()
