"""Wall-clock comparison of the numba and numpy kernel backends.

Run with ``python3 benchmarks/bench_backends.py``. Each kernel is called once
to warm the JIT, then timed over a few repeats. Both backends must agree
bit-for-bit (hash, popcount) or to rounding (Gray walk) before timing counts.
"""

import argparse
import time

import numpy as np

from fllab import _backend
from fllab._kernels import component_bits, gray_energies, popcount_histogram


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def cases(size):
    rng = np.random.default_rng(0)
    keys = rng.integers(0, 2**63, size=50_000 * size, dtype=np.uint64)
    G = rng.standard_normal((8, 16 + size))
    refs = rng.integers(0, 2**20, size=2_000 * size, dtype=np.uint64)
    sols = rng.integers(0, 2**20, size=2_000, dtype=np.uint64)
    return {
        "hash": (lambda b: component_bits(keys, 12, backend=b), "exact"),
        "gray": (lambda b: gray_energies(G, 1.0, backend=b), "close"),
        "popcount": (lambda b: popcount_histogram(refs, sols, 20, backend=b), "exact"),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=2, help="problem scale factor")
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args(argv)
    if not _backend.HAVE_NUMBA:
        print("numba not importable; nothing to compare")
        return 0
    print(f"{'kernel':<10}{'numba [s]':>12}{'numpy [s]':>12}{'speedup':>10}")
    for name, (fn, agreement) in cases(args.size).items():
        a, b = fn("numba"), fn("numpy")
        if agreement == "exact":
            assert np.array_equal(a, b), name
        else:
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
        t_nb = best_of(lambda: fn("numba"), args.repeats)
        t_np = best_of(lambda: fn("numpy"), args.repeats)
        print(f"{name:<10}{t_nb:>12.4f}{t_np:>12.4f}{t_np / t_nb:>10.1f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
