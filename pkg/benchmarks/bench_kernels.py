"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

The first numba call of each kernel includes JIT compilation and is
reported separately.
"""
import argparse
import time

import numpy as np

from lipfield import kernels
from lipfield.fields import Circle, grid_points, star_polygon


def cases(rng):
    star = star_polygon().verts
    res = 256
    circle = Circle().sdf(grid_points(res)).reshape(res, res)
    return {
        "polygon_sdf": (rng.random((200_000, 2)), star),
        "min_dists": (rng.random((3000, 2)), rng.random((3000, 2))),
        "edt_sq": (rng.random((256, 256)) < 0.01,),
        "march_cells": (circle, 0.0),
    }


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        print("numba is not installed; only the numpy kernels are available")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<14}{'numpy s':>12}{'numba s':>12}{'jit s':>10}{'speedup':>10}")
    for name, a in cases(rng).items():
        t0 = time.perf_counter()
        kernels.NUMBA_KERNELS[name](*a)
        jit = time.perf_counter() - t0
        tn = best_of(kernels.NUMPY_KERNELS[name], a, args.repeat)
        tb = best_of(kernels.NUMBA_KERNELS[name], a, args.repeat)
        print(f"{name:<14}{tn:>12.4f}{tb:>12.4f}{jit:>10.2f}{tn / tb:>9.1f}x")


if __name__ == "__main__":
    main()
