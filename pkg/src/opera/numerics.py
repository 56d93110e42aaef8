"""Dense linear algebra helpers, the seeded generator and the finite-difference oracle.

Matrices are plain ``float64`` numpy arrays; the helpers here only add the
shape and finiteness checks the rest of the package relies on.
"""

import math

import numpy as np

from . import _kernels
from .errors import NumericError, ShapeError

_U53 = 1.0 / 9007199254740992.0  # 2**-53


def as_matrix(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise ShapeError(f"expected a matrix, got an array of rank {a.ndim}")
    return a


def check_finite(name, a):
    a = np.asarray(a)
    if not np.all(np.isfinite(a)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(a))[0])
        raise NumericError(f"non-finite value in {name} at index {bad}")
    return a


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise ShapeError(f"matmul needs a matrix on the left, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return check_finite("matmul output", a @ b)


def dot(y, p):
    """Inner product ``y^T p`` of two vectors."""
    y = np.asarray(y, dtype=np.float64).ravel()
    p = np.asarray(p, dtype=np.float64).ravel()
    if y.shape != p.shape:
        raise ShapeError(f"dot length mismatch: {y.shape[0]} vs {p.shape[0]}")
    return float(y @ p)


def finite_diff_grad(f, x, h=None):
    """Central-difference gradient of a scalar function ``f`` at ``x``.

    Every entry is perturbed in turn by ``+-h_ij`` and the gradient entry is
    ``(f(x + h e_ij) - f(x - h e_ij)) / (2 h_ij)``. With ``h=None`` the step is
    ``1e-5 * (1 + |x_ij|)``; a scalar ``h`` is used for every entry. ``x`` is
    never modified; ``f`` receives a perturbed copy.
    """
    x = np.array(x, dtype=np.float64)
    if h is not None and not h > 0:
        raise ValueError("finite-difference step must be positive")
    grad = np.zeros_like(x)
    work = x.copy()
    flat_work = work.reshape(-1)
    for flat in range(x.size):
        idx = np.unravel_index(flat, x.shape)
        x0 = flat_work[flat]
        step = 1e-5 * (1.0 + abs(x0)) if h is None else h
        flat_work[flat] = x0 + step
        f_plus = f(work)
        flat_work[flat] = x0 - step
        f_minus = f(work)
        flat_work[flat] = x0
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericError(f"non-finite function value when perturbing index {tuple(int(i) for i in idx)}")
        grad[idx] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_error(a, b, floor=0.0):
    """``||a - b|| / max(||a||, ||b||, floor)``, or 0 when both are zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b)) / denom


class Rng:
    """SplitMix64 pseudo-random generator.

    The raw stream is a pure function of ``(seed, position)``, so draws are
    identical across runs, platforms and kernel backends. Derived draws:

    * ``uniform``: top 53 bits scaled to ``[0, 1)``.
    * ``normal``: Box-Muller on pairs of uniforms, the first uniform mapped to
      ``(0, 1]`` so the logarithm is finite.
    * ``permutation``: stable argsort of fresh 64-bit keys.

    One instance must not be shared between threads.
    """

    def __init__(self, seed=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = 0

    def __repr__(self):
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def u64(self, n):
        out = _kernels.splitmix64_block(self.seed, self.counter, int(n))
        self.counter += int(n)
        return out

    def next_u64(self):
        return int(self.u64(1)[0])

    def uniform(self, shape=None, low=0.0, high=1.0):
        n = 1 if shape is None else int(np.prod(shape))
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * _U53
        u = low + (high - low) * u
        return float(u[0]) if shape is None else u.reshape(shape)

    def normal(self, shape=None, loc=0.0, scale=1.0):
        n = 1 if shape is None else int(np.prod(shape))
        m = (n + 1) // 2
        bits = self.u64(2 * m) >> np.uint64(11)
        u1 = (bits[0::2].astype(np.float64) + 1.0) * _U53
        u2 = bits[1::2].astype(np.float64) * _U53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        z = loc + scale * z[:n]
        return float(z[0]) if shape is None else z.reshape(shape)

    def integers(self, high, size):
        """Integers in ``[0, high)`` (modulo reduction; bias below 2**-40 for desk sizes)."""
        return (self.u64(size) % np.uint64(high)).astype(np.int64)

    def permutation(self, n):
        return np.argsort(self.u64(n), kind="stable")

    def spawn(self, key):
        """Independent child generator keyed by ``key``; does not advance ``self``."""
        mixed = _kernels.splitmix64_block(self.seed ^ (int(key) & 0xFFFFFFFFFFFFFFFF), 0x5EED, 1)[0]
        return Rng(int(mixed))
