"""Time the numba kernels against the numpy / python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--size 100000]

Both paths are called directly, so MEMH_NO_NUMBA does not need to be set. The
numba column excludes compilation (one warm-up call per kernel). Outputs are
compared for bit equality before timing.
"""

import argparse
import timeit

import numpy as np

from memhist import _kernels as K

SEED = 0x1234_5678_9ABC_DEF0


def cases(size: int):
    arr = np.arange(size, dtype=np.int64)
    weights = np.linspace(1.0, 5.0, size)
    k = max(1, size // 1000)
    return {
        "block": (lambda: K.np_block(SEED, 0, size), lambda: K.nb_block(SEED, 0, size)),
        "bounded": (lambda: K.np_bounded(SEED, 0, 1000, size), lambda: K.nb_bounded(SEED, 0, 1000, size)),
        "shuffle": (lambda: K.py_shuffle(arr, SEED, 0), lambda: K.nb_shuffle(arr, SEED, 0)),
        f"weighted k={k}": (lambda: K.py_weighted(weights, k, SEED, 0), lambda: K.nb_weighted(weights, k, SEED, 0)),
    }


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--size", type=int, default=100_000)
    args = parser.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    print(f"size={args.size} repeat={args.repeat} (best of, seconds)")
    print(f"{'kernel':<16}{'fallback':>12}{'numba':>12}{'speedup':>10}")
    for name, (slow, fast) in cases(args.size).items():
        assert same(slow(), fast()), f"{name}: paths disagree"
        t_slow = min(timeit.repeat(slow, number=1, repeat=args.repeat))
        t_fast = min(timeit.repeat(fast, number=1, repeat=args.repeat))
        print(f"{name:<16}{t_slow:>12.5f}{t_fast:>12.5f}{t_slow / t_fast:>9.1f}x")


if __name__ == "__main__":
    main()
