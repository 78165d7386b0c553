"""Pairwise-independent hashing of grid cells, and the shared bit mixer.

The sketch stores, for every subtree root, a short hash of the integer cell
index vector of its surrogate. Recovery enumerates nearby cells and compares
hashes, so the hash family must be:

* seedable from one 64-bit master seed (the seed travels in the blob),
* evaluable incrementally one coordinate at a time (the recovery loop fuses
  hashing into ball enumeration and never materializes candidate vectors),
* reproducible across platforms, hence fixed-width integer arithmetic only.

A degree-one polynomial over the Mersenne prime 2^61 - 1, truncated to a
configurable output width, satisfies all three. Coefficients are drawn
per level from SplitMix64, which is also the package-wide source of derived
randomness (sign matrices, shifts), keeping sketches bit-reproducible
without relying on any library RNG stream.
"""

from __future__ import annotations

import math

import numpy as np

M61 = np.uint64((1 << 61) - 1)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

_U32_MASK = np.uint64(0xFFFFFFFF)
_U29_MASK = np.uint64((1 << 29) - 1)


def mix64(x: np.ndarray | int) -> np.ndarray:
    """SplitMix64 finalizer: a bijective scramble of 64-bit values."""
    with np.errstate(over="ignore"):  # wrapping mod 2^64 is the point
        z = np.asarray(x, dtype=np.uint64).copy()
        z ^= z >> np.uint64(30)
        z *= _MIX1
        z ^= z >> np.uint64(27)
        z *= _MIX2
        z ^= z >> np.uint64(31)
    return z


def seeded_values(seed: int, count: int, stream: int = 0) -> np.ndarray:
    """`count` reproducible 64-bit values from (seed, stream)."""
    with np.errstate(over="ignore"):
        base = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + np.uint64(stream) * _MIX2
        idx = np.arange(1, count + 1, dtype=np.uint64) * _GOLDEN
        return mix64(base + idx)


def mulmod_m61(a: int, z: np.ndarray) -> np.ndarray:
    """(a * z) mod (2^61 - 1) for a in [0, 2^61 - 1) and z < 2^31."""
    z = np.asarray(z, dtype=np.uint64)
    a = np.uint64(a)
    hi = (a >> np.uint64(32)) * z
    lo = (a & _U32_MASK) * z
    s = ((hi & _U29_MASK) << np.uint64(32)) + (hi >> np.uint64(29)) + lo
    s = (s & M61) + (s >> np.uint64(61))
    return np.where(s >= M61, s - M61, s)


def fold_m61(s: np.ndarray) -> np.ndarray:
    """Partial reduction keeping values below 2^61 + 2 after an addition."""
    return (s & M61) + (s >> np.uint64(61))


def reduce_m61(s: np.ndarray) -> np.ndarray:
    s = (s & M61) + (s >> np.uint64(61))
    s = (s & M61) + (s >> np.uint64(61))
    return np.where(s >= M61, s - M61, s)


def hash_width(d: int, num_levels: int, q: int, delta: float) -> int:
    """Output width making false matches in recovery balls improbable.

    The candidate ball has O(1)^d corners (9 per axis is a safe stand-in for
    the measured constant), recovery runs once per level, and the budget is
    delta split over q queries.
    """
    bits = d * math.log2(9.0) + math.log2(num_levels) + math.log2(q / delta)
    return min(64, max(1, math.ceil(bits)))


class GridHashes:
    """One degree-one polynomial hash per hierarchy level.

    h_l(z) = ((a_l0 + sum_i a_li * z_i) mod (2^61 - 1)) & (2^width - 1),
    with all coefficients derived from `seed`.
    """

    def __init__(self, seed: int, num_levels: int, d: int, width: int) -> None:
        if not 1 <= width <= 64:
            raise ValueError(f"width must be in [1, 64], got {width}")
        self.seed = seed
        self.num_levels = num_levels
        self.d = d
        self.width = width
        raw = seeded_values(seed, num_levels * (d + 1)).reshape(num_levels, d + 1)
        self.coeffs = raw & M61
        self.coeffs %= M61
        if width == 64:
            self.mask = np.uint64(0xFFFFFFFFFFFFFFFF)
        else:
            self.mask = np.uint64((1 << width) - 1)

    def axis_term(self, level: int, axis: int, cells: np.ndarray) -> np.ndarray:
        """Contribution of one coordinate; for the fused recovery loop."""
        return mulmod_m61(int(self.coeffs[level, axis + 1]), cells)

    def finalize(self, level: int, acc: np.ndarray) -> np.ndarray:
        return reduce_m61(acc + self.coeffs[level, 0]) & self.mask

    def hash_cells(self, level: int, cells: np.ndarray) -> np.ndarray:
        """Hash each row of an (m, d) int cell-index array."""
        cells = np.atleast_2d(np.asarray(cells))
        if cells.shape[1] != self.d:
            raise ValueError(f"expected {self.d} coordinates, got {cells.shape[1]}")
        if cells.min() < 0 or cells.max() >= 1 << 31:
            raise ValueError("cell indices must fit in 31 bits")
        acc = np.zeros(cells.shape[0], dtype=np.uint64)
        for axis in range(self.d):
            acc = fold_m61(acc + self.axis_term(level, axis, cells[:, axis]))
        return self.finalize(level, acc)
