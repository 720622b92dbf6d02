#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Runs every kernel that has two implementations on representative workloads
(the 64x64-latent shapes the engine actually uses) and prints per-call
timings for both paths plus the speedup. Requires numba; run with
REGIONFUSE_BACKEND unset or set to "numba".
"""

import timeit

import numpy as np

from regionfuse.backend import BACKEND, implementations


def bench(fn, *args, repeat=5, number=200):
    fn(*args)  # warm up (JIT compile on the numba path)
    times = timeit.repeat(lambda: fn(*args), repeat=repeat, number=number)
    return min(times) / number


def main():
    if BACKEND != "numba":
        raise SystemExit("numba backend inactive; unset REGIONFUSE_BACKEND "
                         "(or set it to 'numba') and retry")
    impls = implementations()
    rng = np.random.default_rng(0)

    workloads = {
        "softmax_attention (4096 tokens, 12 keys)": (
            "softmax_attention",
            (rng.normal(size=(4096, 16)), rng.normal(size=(12, 16)),
             rng.normal(size=(12, 8))),
        ),
        "softmax_attention (1024 tokens, 12 keys)": (
            "softmax_attention",
            (rng.normal(size=(1024, 16)), rng.normal(size=(12, 16)),
             rng.normal(size=(12, 16))),
        ),
        "bilinear_resize (32x32 -> 64x64)": (
            "bilinear_resize",
            (rng.normal(size=(32, 32)), 64, 64),
        ),
        "block_mean (64x64, factor 2)": (
            "block_mean",
            (rng.normal(size=(64, 64)), 2),
        ),
    }

    print(f"{'workload':45s} {'numpy':>12s} {'numba':>12s} {'speedup':>9s}")
    for name, (kernel, args) in workloads.items():
        t_np = bench(impls["numpy"][kernel], *args)
        t_nb = bench(impls["numba"][kernel], *args)
        print(f"{name:45s} {t_np * 1e6:10.1f}us {t_nb * 1e6:10.1f}us "
              f"{t_np / t_nb:8.2f}x")


if __name__ == "__main__":
    main()
