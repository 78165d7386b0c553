"""Hashing: modular arithmetic against a bigint oracle, widths, determinism."""

from __future__ import annotations

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from nnsketch.hashing import (
    GridHashes,
    hash_width,
    mix64,
    mulmod_m61,
    seeded_values,
)

M61 = (1 << 61) - 1


def oracle_hash(coeffs: np.ndarray, level: int, cells) -> int:
    """Unbounded-integer reference for the polynomial hash (pre-mask)."""
    acc = int(coeffs[level, 0])
    for axis, z in enumerate(cells):
        acc += int(coeffs[level, axis + 1]) * int(z)
    return acc % M61


@given(
    a=st.integers(0, M61 - 1),
    seed=st.integers(0, 2**32 - 1),
)
@settings(max_examples=100, deadline=None)
def test_mulmod_matches_bigints(a, seed):
    rng = np.random.default_rng(seed)
    z = rng.integers(0, 1 << 31, size=32, dtype=np.int64)
    got = mulmod_m61(a, z)
    want = np.array([(a * int(v)) % M61 for v in z], dtype=np.uint64)
    assert np.array_equal(got, want)


@given(
    seed=st.integers(0, 2**64 - 1),
    d=st.integers(1, 8),
    level=st.integers(0, 5),
    data_seed=st.integers(0, 2**32 - 1),
)
@settings(max_examples=80, deadline=None)
def test_hash_matches_bigint_oracle(seed, d, level, data_seed):
    h = GridHashes(seed, num_levels=6, d=d, width=32)
    rng = np.random.default_rng(data_seed)
    cells = rng.integers(0, 1 << 26, size=(8, d), dtype=np.int64)
    got = h.hash_cells(level, cells)
    want = np.array(
        [oracle_hash(h.coeffs, level, row) & 0xFFFFFFFF for row in cells],
        dtype=np.uint64,
    )
    assert np.array_equal(got, want)


def test_incremental_accumulation_matches_batch():
    h = GridHashes(99, num_levels=3, d=4, width=20)
    rng = np.random.default_rng(0)
    cells = rng.integers(0, 1 << 20, size=(50, 4), dtype=np.int64)
    acc = np.zeros(50, dtype=np.uint64)
    for axis in range(4):
        acc = (acc & np.uint64(M61)) + (acc >> np.uint64(61))
        acc += h.axis_term(1, axis, cells[:, axis])
    assert np.array_equal(h.finalize(1, acc), h.hash_cells(1, cells))


def test_determinism_and_seed_sensitivity():
    cells = np.arange(12, dtype=np.int64).reshape(3, 4)
    a = GridHashes(7, num_levels=2, d=4, width=31).hash_cells(0, cells)
    b = GridHashes(7, num_levels=2, d=4, width=31).hash_cells(0, cells)
    c = GridHashes(8, num_levels=2, d=4, width=31).hash_cells(0, cells)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_levels_hash_independently():
    h = GridHashes(3, num_levels=4, d=2, width=40)
    cells = np.array([[5, 9]], dtype=np.int64)
    values = {int(h.hash_cells(level, cells)[0]) for level in range(4)}
    assert len(values) == 4


def test_collision_rate_near_uniform():
    h = GridHashes(42, num_levels=1, d=3, width=16)
    rng = np.random.default_rng(1)
    a = rng.integers(0, 1 << 24, size=(20000, 3), dtype=np.int64)
    b = a.copy()
    b[:, 0] += 1 + rng.integers(0, 100, size=20000)
    collisions = int((h.hash_cells(0, a) == h.hash_cells(0, b)).sum())
    # expectation ~ 20000 / 2^16 = 0.3
    assert collisions <= 10


def test_width_formula_at_reference_parameters():
    # d=6, phi=1024: top level 13, so 14 levels; q=16, delta=0.1
    assert hash_width(d=6, num_levels=14, q=16, delta=0.1) == 31
    assert hash_width(d=64, num_levels=30, q=16, delta=0.1) == 64


def test_seeded_values_stable():
    v = seeded_values(123, 4)
    again = seeded_values(123, 4)
    assert np.array_equal(v, again)
    assert len(set(v.tolist())) == 4
    assert not np.array_equal(v, seeded_values(123, 4, stream=1))


def test_mix64_is_injective_on_a_sample():
    x = np.arange(100000, dtype=np.uint64)
    assert len(np.unique(mix64(x))) == 100000
