"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel with the best wall time of each backend and the
speedup. Falls back to timing only the numpy path if the extension is absent.
"""
import argparse
import timeit

import numpy as np

from dicom_ssl import _kernels_py

try:
    from dicom_ssl import _kernels as compiled
except ImportError:
    compiled = None


def cases(rng):
    grid = 14
    uniforms = rng.random(6 * grid * grid)
    a = rng.integers(0, 256, (2000, 2)).astype(np.int64)
    b = rng.integers(0, 256, (2000, 2)).astype(np.int64)
    x = rng.standard_normal((400, 32))
    labels = rng.integers(0, 2, 400).astype(np.int64)
    scores = np.sort(rng.integers(0, 1000, 100_000).astype(np.float64))[::-1].copy()
    flags = rng.integers(0, 2, 100_000).astype(np.int64)
    return {
        "group_mask 14x14 @0.7": ("group_mask", (grid, grid, int(np.ceil(0.7 * grid * grid)), 2.0, uniforms)),
        "directed_min_dist 2000x2000": ("directed_min_dist", (a, b)),
        "silhouette_samples n=400 d=32": ("silhouette_samples", (x, labels, 2)),
        "tie_grouped_counts n=1e5": ("tie_grouped_counts", (scores, flags)),
    }


def best_time(fn, args, repeat):
    number = 1
    while timeit.timeit(lambda: fn(*args), number=number) < 0.2 and number < 10_000:
        number *= 10
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':32s} {'numpy':>12s} {'cython':>12s} {'speedup':>8s}")
    for label, (name, fargs) in cases(rng).items():
        t_py = best_time(getattr(_kernels_py, name), fargs, args.repeat)
        if compiled is None:
            print(f"{label:32s} {t_py * 1e3:10.3f}ms {'n/a':>12s} {'n/a':>8s}")
            continue
        t_c = best_time(getattr(compiled, name), fargs, args.repeat)
        print(f"{label:32s} {t_py * 1e3:10.3f}ms {t_c * 1e3:10.3f}ms {t_py / t_c:7.1f}x")


if __name__ == "__main__":
    main()
