"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5]

Both paths must agree bit for bit before anything is timed. The first numba
call (compilation or cache load) is excluded from the timings.
"""

import argparse
import sys
from timeit import repeat

import numpy as np

from opera import _kernels
from opera.numerics import Rng


def cases():
    rng = Rng(0)
    # one epoch of augmentation draws on the desk benchmark (640 rows x 32 dims, a few draws each)
    yield "splitmix64 64k draws", _kernels.splitmix64_block_numpy, _kernels.splitmix64_block_numba, (42, 0, 65_536)
    yield "splitmix64 1M draws", _kernels.splitmix64_block_numpy, _kernels.splitmix64_block_numba, (42, 0, 1_000_000)
    # kNN on the desk benchmark: 160 test rows against 640 train rows
    sims = rng.normal((160, 640))
    labels = rng.integers(8, 640)
    yield "knn vote 160x640 k=5", _kernels.knn_vote_numpy, _kernels.knn_vote_numba, (sims, labels, 5, 8)
    sims = rng.normal((1000, 4000))
    labels = rng.integers(10, 4000)
    yield "knn vote 1000x4000 k=20", _kernels.knn_vote_numpy, _kernels.knn_vote_numba, (sims, labels, 20, 10)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return 1

    print(f"{'kernel':<26}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, slow, fast, call_args in cases():
        if not np.array_equal(slow(*call_args), fast(*call_args)):
            print(f"{name}: backends disagree")
            return 1
        t_np = min(repeat(lambda: slow(*call_args), number=1, repeat=args.repeat))
        t_nb = min(repeat(lambda: fast(*call_args), number=1, repeat=args.repeat))
        print(f"{name:<26}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
