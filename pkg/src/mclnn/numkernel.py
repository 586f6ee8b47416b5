"""Dense float64 helpers and a portable, seedable random generator.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.  Column-major
order only matters when tensors are written to disk (see ``network``); every
function here is independent of the in-memory layout.

``Rng`` implements SplitMix64 (Steele, Lea & Flood, 2014).  The generator is a
pure function of (seed, counter), so it is vectorised with numpy's wrapping
uint64 arithmetic and produces the same stream on every platform.
"""

from __future__ import annotations

from typing import Sequence, TypeVar

import numpy as np

T = TypeVar("T")

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Operand dimensions do not agree."""


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, count: int, offset: int = 0) -> np.ndarray:
    """Return ``count`` SplitMix64 outputs starting after ``offset`` draws."""
    idx = np.arange(offset + 1, offset + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        state = np.uint64(seed & _MASK64) + idx * _GAMMA
        return _mix(state)


class Rng:
    """Single-owner SplitMix64 stream.

    >>> Rng(7).uniform(0.0, 1.0) == Rng(7).uniform(0.0, 1.0)
    True
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_u64(self, count: int) -> np.ndarray:
        out = splitmix64(self.seed, count, self.counter)
        self.counter += count
        return out

    def random(self, size=None) -> np.ndarray | float:
        """Uniform doubles in [0, 1) with 53 bits of resolution."""
        n = 1 if size is None else int(np.prod(size))
        bits = self.next_u64(n) >> np.uint64(11)
        vals = bits.astype(np.float64) * (1.0 / (1 << 53))
        if size is None:
            return float(vals[0])
        return vals.reshape(size)

    def uniform(self, lo: float, hi: float, size=None):
        if not lo < hi:
            raise ValueError(f"uniform bounds must satisfy lo < hi, got [{lo}, {hi})")
        u = self.random(size)
        out = lo + (hi - lo) * u
        # rounding can land exactly on hi for wide intervals
        if size is None:
            return out if out < hi else np.nextafter(hi, lo)
        return np.where(out < hi, out, np.nextafter(hi, lo))

    def normal(self, size) -> np.ndarray:
        """Standard normal draws via Box-Muller."""
        n = int(np.prod(size))
        half = (n + 1) // 2
        u1 = 1.0 - self.random(half)  # (0, 1]
        u2 = self.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n].reshape(size)

    def integers(self, high: int, size=None):
        """Integers in [0, high) by scaling 53-bit uniforms."""
        if high < 1:
            raise ValueError("high must be >= 1")
        u = np.asarray(self.random(size))
        out = np.minimum((u * high).astype(np.int64), high - 1)
        return int(out) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.random(n - 1)
        for pos, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[pos] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def shuffle(self, seq: Sequence[T]) -> list[T]:
        """Return a shuffled copy of ``seq``."""
        items = list(seq)
        return [items[i] for i in self.permutation(len(items))]

    def spawn(self, key: int) -> "Rng":
        """Independent child stream keyed by ``key``; does not advance self."""
        child = splitmix64(self.seed ^ ((int(key) * 0xD1B54A32D192ED03) & _MASK64), 1)
        return Rng(int(child[0]))


def rng_uniform(rng: Rng, lo: float, hi: float) -> float:
    return rng.uniform(lo, hi)


def rng_shuffle(rng: Rng, seq: Sequence[T]) -> list[T]:
    return rng.shuffle(seq)


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matvec(M, x) -> np.ndarray:
    """Row-vector product ``x . M`` for ``M`` of shape (l, e) and ``x`` of length l."""
    M = as_matrix(M)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != M.shape[0]:
        raise ShapeError(f"cannot multiply vector of shape {x.shape} by matrix {M.shape}")
    return x @ M


def elementwise_mul(A, B) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ShapeError(f"shape mismatch: {A.shape} vs {B.shape}")
    return A * B


def assert_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite values in {what}")
    return a

