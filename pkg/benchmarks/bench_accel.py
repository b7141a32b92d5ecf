#!/usr/bin/env python3
"""Benchmark the jitted inner loops against their pure-numpy fallbacks.

Runs both implementations directly (regardless of the
KERNELNN_DISABLE_NUMBA selection) so a single invocation reports the
speedup table:

    python benchmarks/bench_accel.py [--repeat 3] [--large]
"""

import argparse
import time

import numpy as np

from kernelnn import _accel

HEADER = f"{'n':>6s} {'p':>7s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}"


def _time(fn, *args, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _row(fn_numpy, fn_numba, G, repeat: int) -> str:
    if _accel._HAVE_NUMBA:
        fn_numba(np.ascontiguousarray(G[:4]))  # compile outside the timer
        t_numba = _time(fn_numba, G, repeat=repeat)
    else:
        t_numba = float("nan")
    t_numpy = _time(fn_numpy, G, repeat=repeat)
    n, p = G.shape
    return (f"{n:>6d} {p:>7d} {t_numpy:>9.4f}s {t_numba:>9.4f}s "
            f"{t_numpy / t_numba:>7.1f}x")


def bench_ibs(sizes, repeat: int) -> None:
    print("ibs_distance_sums")
    print(HEADER, flush=True)
    for n, p in sizes:
        G = np.random.default_rng(0).integers(0, 3, size=(n, p)).astype(np.float64)
        print(_row(_accel.ibs_distance_sums_numpy,
                   _accel.ibs_distance_sums_numba if _accel._HAVE_NUMBA else None,
                   G, repeat), flush=True)


def bench_counts(sizes, repeat: int) -> None:
    print("genotype_counts")
    print(HEADER, flush=True)
    for n, p in sizes:
        rng = np.random.default_rng(1)
        G = rng.integers(0, 3, size=(n, p)).astype(np.float64)
        G[rng.uniform(size=(n, p)) < 0.02] = np.nan
        print(_row(_accel.genotype_counts_numpy,
                   _accel.genotype_counts_numba if _accel._HAVE_NUMBA else None,
                   G, repeat), flush=True)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--large", action="store_true",
                        help="include sizes where the numpy path takes minutes")
    args = parser.parse_args()
    print(f"numba available: {_accel._HAVE_NUMBA}; "
          f"dispatcher using numba: {_accel.USE_NUMBA}", flush=True)

    ibs_sizes = [(100, 500), (200, 2000), (500, 5000)]
    count_sizes = [(1000, 5000), (5000, 20000)]
    if args.large:
        ibs_sizes.append((1000, 10000))
        count_sizes.append((10000, 50000))
    bench_ibs(ibs_sizes, args.repeat)
    print()
    bench_counts(count_sizes, args.repeat)


if __name__ == "__main__":
    main()
