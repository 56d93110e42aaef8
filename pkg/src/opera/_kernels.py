"""Hot inner loops, each with a numba build and a pure-numpy twin.

The numba path is used unless ``OPERA_DISABLE_NUMBA=1`` is set in the
environment (or numba fails to import). Both paths return bitwise-identical
results: the kernels only do integer arithmetic or comparisons, never
transcendental floating point, so there is no libm drift between them.

Kernels
-------
splitmix64_block(seed, counter, n)
    The ``n`` outputs of the SplitMix64 generator following position
    ``counter``. SplitMix64 is counter-based::

        state_i = seed + GAMMA * i          (mod 2**64)
        z = state_i
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        out_i = z ^ (z >> 31)

    with ``GAMMA = 0x9E3779B97F4A7C15`` and ``i = counter + 1, ..., counter + n``.

knn_vote(sims, train_labels, k, num_classes)
    Majority vote among the ``k`` most similar training rows for every
    query row. Neighbours are ranked by descending similarity, ties broken by
    lower training index; vote ties go to the lowest class id.
"""

import os

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)

_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)


def _numba_requested():
    return os.environ.get("OPERA_DISABLE_NUMBA", "0").strip().lower() not in ("1", "true", "yes", "on")


try:  # pragma: no cover - exercised implicitly
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _numba_requested()


# ---------------------------------------------------------------------------
# numpy twins
# ---------------------------------------------------------------------------


def splitmix64_block_numpy(seed, counter, n):
    idx = np.arange(counter + 1, counter + n + 1, dtype=np.uint64)
    z = np.uint64(seed) + GAMMA * idx
    z = (z ^ (z >> _S30)) * MIX1
    z = (z ^ (z >> _S27)) * MIX2
    return z ^ (z >> _S31)


def knn_vote_numpy(sims, train_labels, k, num_classes):
    n_query = sims.shape[0]
    out = np.empty(n_query, dtype=np.int64)
    for i in range(n_query):
        order = np.argsort(-sims[i], kind="mergesort")[:k]
        counts = np.bincount(train_labels[order], minlength=num_classes)
        out[i] = int(np.argmax(counts))
    return out


# ---------------------------------------------------------------------------
# numba builds
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _splitmix64_block_jit(seed, counter, n):
        out = np.empty(n, dtype=np.uint64)
        gamma = np.uint64(0x9E3779B97F4A7C15)
        m1 = np.uint64(0xBF58476D1CE4E5B9)
        m2 = np.uint64(0x94D049BB133111EB)
        s30 = np.uint64(30)
        s27 = np.uint64(27)
        s31 = np.uint64(31)
        state = seed + gamma * counter
        for i in range(n):
            state = state + gamma
            z = state
            z = (z ^ (z >> s30)) * m1
            z = (z ^ (z >> s27)) * m2
            out[i] = z ^ (z >> s31)
        return out

    @numba.njit(cache=True)
    def _knn_vote_jit(sims, train_labels, k, num_classes):
        n_query, n_train = sims.shape
        out = np.empty(n_query, dtype=np.int64)
        counts = np.zeros(num_classes, dtype=np.int64)
        top_val = np.empty(k, dtype=np.float64)
        top_idx = np.empty(k, dtype=np.int64)
        for i in range(n_query):
            # top-k insertion buffer, descending; a later index never displaces an equal value
            filled = 0
            for j in range(n_train):
                s = sims[i, j]
                if filled == k and not s > top_val[k - 1]:
                    continue
                pos = filled if filled < k else k - 1
                while pos > 0 and s > top_val[pos - 1]:
                    if pos < k:
                        top_val[pos] = top_val[pos - 1]
                        top_idx[pos] = top_idx[pos - 1]
                    pos -= 1
                top_val[pos] = s
                top_idx[pos] = j
                if filled < k:
                    filled += 1
            counts[:] = 0
            for j in range(filled):
                counts[train_labels[top_idx[j]]] += 1
            best = 0
            for c in range(1, num_classes):
                if counts[c] > counts[best]:
                    best = c
            out[i] = best
        return out

    def splitmix64_block_numba(seed, counter, n):
        return _splitmix64_block_jit(np.uint64(seed), np.uint64(counter), np.int64(n))

    def knn_vote_numba(sims, train_labels, k, num_classes):
        return _knn_vote_jit(
            np.ascontiguousarray(sims, dtype=np.float64),
            np.ascontiguousarray(train_labels, dtype=np.int64),
            int(k),
            int(num_classes),
        )

else:  # pragma: no cover
    splitmix64_block_numba = None
    knn_vote_numba = None


if USE_NUMBA:
    splitmix64_block = splitmix64_block_numba
    knn_vote = knn_vote_numba
else:
    splitmix64_block = splitmix64_block_numpy
    knn_vote = knn_vote_numpy


def backend():
    """Name of the active kernel path."""
    return "numba" if USE_NUMBA else "numpy"
