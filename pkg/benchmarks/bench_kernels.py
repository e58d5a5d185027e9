"""Benchmark the compiled nearest-neighbor kernel against the numpy fallback.

Run from the repository root:

    python3 benchmarks/bench_kernels.py

Both backends are exact; this only compares wall-clock time and verifies
that results are bit-identical on the benchmark inputs.
"""

import argparse
import time

import numpy as np

from mqprior.kernels import _kernels_py

try:
    from mqprior.kernels import _kernels
except ImportError:
    _kernels = None


def bench(fn, queries, codes, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(queries, codes)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    shapes = [
        (64, 64, 8),      # training batch vs one codebook
        (512, 256, 8),    # large batch vs large book
        (1024, 4000, 14), # generated transitions vs archive
    ]
    print(f"{'batch':>6} {'codes':>6} {'dim':>4} {'numpy ms':>10} "
          f"{'cython ms':>10} {'speedup':>8}")
    for b, k, d in shapes:
        queries = rng.standard_normal((b, d))
        codes = rng.standard_normal((k, d))
        t_py = bench(_kernels_py.nearest_code, queries, codes, args.repeats)
        if _kernels is None:
            print(f"{b:>6} {k:>6} {d:>4} {t_py * 1e3:>10.3f} {'n/a':>10} {'n/a':>8}")
            continue
        t_cy = bench(_kernels.nearest_code, queries, codes, args.repeats)
        i0, d0 = _kernels_py.nearest_code(queries, codes)
        i1, d1 = _kernels.nearest_code(queries, codes)
        assert np.array_equal(i0, i1) and np.array_equal(d0, d1), "backend mismatch"
        print(f"{b:>6} {k:>6} {d:>4} {t_py * 1e3:>10.3f} "
              f"{t_cy * 1e3:>10.3f} {t_py / t_cy:>7.2f}x")


if __name__ == "__main__":
    main()
