#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Usage:
    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is checked for agreement first, then timed after one warm-up
call (so numba compilation is excluded). Timings are the best of
``--repeat`` runs. The workloads match desk-scale use: a training batch of
target latents against K=128 codes, a Lloyd accumulation pass, and the SSIM
Gaussian filter over an eval clip.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from reftok import _accel


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def workloads(rng: np.random.Generator):
    x = rng.standard_normal((8 * 48, 64)).astype(np.float32)
    codes = rng.standard_normal((128, 64)).astype(np.float32)
    big = rng.standard_normal((20000, 64))
    idx = rng.integers(0, 128, size=len(big))
    img = rng.random((18, 32, 32))
    g = np.exp(-0.5 * (np.arange(11) - 5.0) ** 2 / 1.5 ** 2)
    g /= g.sum()
    return [
        ("nearest_code 384x64 vs K=128",
         lambda: _accel.nearest_code_numba(x, codes), lambda: _accel.nearest_code_numpy(x, codes)),
        ("accumulate_centroids 20000x64",
         lambda: _accel.accumulate_centroids_numba(big, idx, 128),
         lambda: _accel.accumulate_centroids_numpy(big, idx, 128)),
        ("filter2d_valid 18x32x32, 11 taps",
         lambda: _accel.filter2d_valid_numba(img, g), lambda: _accel.filter2d_valid_numpy(img, g)),
    ]


def agree(a, b) -> bool:
    if isinstance(a, tuple):
        return all(agree(u, v) for u, v in zip(a, b))
    if np.issubdtype(np.asarray(a).dtype, np.integer):
        return np.array_equal(a, b)
    return np.allclose(a, b, rtol=1e-5, atol=1e-6)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':36s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, fast, slow in workloads(rng):
        if not agree(fast(), slow()):
            print(f"{name}: numba and numpy results disagree")
            return 1
        tf = best_of(fast, args.repeat)
        ts = best_of(slow, args.repeat)
        print(f"{name:36s} {tf * 1e3:10.3f} {ts * 1e3:10.3f} {ts / tf:7.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
