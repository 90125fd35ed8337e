#!/usr/bin/env python3
"""Compare the compiled flow kernels against the numpy fallback.

Run after building the extension (`python setup.py build_ext --inplace`):

    python benchmarks/bench_kernels.py [--size 64] [--repeats 5]

Prints per-kernel wall time for every importable backend plus the end-to-end
estimator cost, and verifies the backends agree numerically.
"""

import argparse
import time

import numpy as np

from mexflow._kernels import backends
from mexflow.flow import FlowConfig, central_gradients, estimate_flow


def timer(fn, repeats):
    fn()
    t0 = time.perf_counter()
    for _ in range(repeats):
        out = fn()
    return (time.perf_counter() - t0) / repeats, out


def texture(size, seed=0):
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    img = np.zeros((size, size))
    for _ in range(30):
        cx, cy = rng.uniform(5, size - 5, 2)
        sig = rng.uniform(2.5, size / 7)
        img += rng.uniform(-1, 1) * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sig**2))
    lo, hi = img.min(), img.max()
    return 0.25 + 0.5 * (img - lo) / (hi - lo)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    mods = backends()
    print(f"backends available: {', '.join(mods)}")
    size = args.size
    i0 = texture(size, 0) * 255
    i1 = texture(size, 0) * 255
    i1 = np.roll(i1, 1, axis=1)
    gx0, gy0 = central_gradients(i0)
    gx1, gy1 = central_gradients(i1)
    ix, iy = 0.5 * (gx0 + gx1), 0.5 * (gy0 + gy1)
    it = i1 - i0
    z = np.zeros_like(i0)
    rng = np.random.default_rng(1)
    u = rng.normal(0, 1.5, i0.shape)
    v = rng.normal(0, 1.5, i0.shape)

    rows = [
        ("warp_bilinear", lambda m: (lambda: m.warp_bilinear(i0, u, v))),
        ("hs_solve (200 it)", lambda m: (lambda: m.hs_solve(ix, iy, it, 15.0, 200, z, z))),
        ("lk_flow (r=7)", lambda m: (lambda: m.lk_flow(ix / 255, iy / 255, it / 255, 7, 1e-4))),
        (
            "tvl1_level (5x30)",
            lambda m: (lambda: m.tvl1_level(i0, i1, gx1, gy1, z, z, 0.15, 0.3, 0.25, 5, 30)),
        ),
    ]
    print(f"\nkernel timings at {size}x{size} ({args.repeats} repeats):")
    print(f"{'kernel':<22}" + "".join(f"{name:>14}" for name in mods) + f"{'speedup':>10}")
    for label, make in rows:
        times = {}
        outs = {}
        for name, mod in mods.items():
            times[name], outs[name] = timer(make(mod), args.repeats)
        line = f"{label:<22}" + "".join(f"{times[name] * 1e3:>11.2f} ms" for name in mods)
        if len(mods) == 2:
            line += f"{times['python'] / times['c']:>9.1f}x"
            a, b = outs["python"], outs["c"]
            a0 = a[0] if isinstance(a, tuple) else a
            b0 = b[0] if isinstance(b, tuple) else b
            assert np.allclose(a0, b0, atol=1e-8), f"{label}: backends disagree"
        print(line)

    print(f"\nend-to-end estimate_flow at {size}x{size} (selected backend):")
    for method in ("horn_schunck", "lucas_kanade", "tvl1"):
        dt, _ = timer(
            lambda: estimate_flow(i0 / 255, i1 / 255, FlowConfig(method=method)), args.repeats
        )
        print(f"  {method:<14} {dt * 1e3:8.2f} ms")


if __name__ == "__main__":
    main()
