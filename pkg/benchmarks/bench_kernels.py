"""Benchmark the numba and pure-numpy kernel paths.

Usage: python benchmarks/bench_kernels.py [repeats]

Typical workload sizes: polygon fill over a vertebra bbox, Gaussian
smoothing of a patch-sized logit mask, and overlap counts between two
vertebra masks. The numba path is also what SPINEFM_NUMBA=auto picks when
numba imports; SPINEFM_NUMBA=0 forces the numpy path at import time.
"""

import sys
import time

import numpy as np

from spinefm import kernels


def vertebra_polygon(n=28, cx=26.0, cy=18.0, rx=22.0, ry=13.0):
    ang = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    return cx + rx * np.cos(ang), cy + ry * np.sin(ang)


def bench(fn, repeats):
    fn()  # warm up (JIT compile on the numba path)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def main():
    repeats = int(sys.argv[1]) if len(sys.argv) > 1 else 200
    rng = np.random.default_rng(0)
    vx, vy = vertebra_polygon()
    field = rng.random((96, 96))
    kern = kernels.gaussian_kernel(2.0)
    mask_a = rng.random((96, 96)) < 0.3
    mask_b = rng.random((96, 96)) < 0.3

    workloads = {
        "polygon_fill 52x36": lambda: kernels.polygon_fill(vx, vy, 0, 0, 52, 36),
        "gaussian_blur 96x96 s2": lambda: kernels.gaussian_blur(field, kern),
        "overlap_counts 96x96": lambda: kernels.overlap_counts(mask_a, mask_b, 11, -7),
    }

    results = {}
    for backend in ("numpy", "numba"):
        try:
            kernels.set_backend(backend)
        except ImportError:
            print(f"{backend}: unavailable, skipping")
            continue
        for name, fn in workloads.items():
            results[(backend, name)] = bench(fn, repeats)

    print(f"\n{'workload':28s} {'numpy':>12s} {'numba':>12s} {'speedup':>9s}")
    for name in workloads:
        t_np = results.get(("numpy", name))
        t_nb = results.get(("numba", name))
        if t_np is None or t_nb is None:
            continue
        print(f"{name:28s} {t_np * 1e6:10.1f}us {t_nb * 1e6:10.1f}us {t_np / t_nb:8.2f}x")


if __name__ == "__main__":
    main()
