"""Exact grid geometry over the bounded integer domain [-phi, phi]^d.

Everything downstream (hierarchy surrogates, hash recovery, codecs) leans on
three properties of this module:

1. Grid sides are exact powers of two, so snapping integer points at unit
   resolution is lossless and all corner coordinates are dyadic rationals
   representable in binary64.
2. Grid selection (`grid_for`) compares squared sides against squared target
   resolution with rational arithmetic, so the inclusive boundary case picks
   the same grid at build time and decode time on every platform.
3. Ball enumeration visits corners in lexicographic cell order with exact
   integer bounds per axis, so hash recovery enumerates candidates in a
   reproducible order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np

# A grid refined this far below unit resolution means the requested
# resolution underflowed (gamma collapsed toward zero); treat as an error
# rather than looping forever.
MAX_GRID_HALVINGS = 200

NPTS_MAGIC = b"NPTS"
NPTS_VERSION = 1


class DomainError(ValueError):
    """A coordinate fell outside [-phi, phi]^d."""


class GridResolutionError(ValueError):
    """No power-of-two grid at or below MAX_GRID_HALVINGS fits the target."""


def is_power_of_two(value: int) -> bool:
    return value >= 1 and (value & (value - 1)) == 0


@dataclass(frozen=True)
class Params:
    """Sketch parameters shared by builder, codec, and query engines.

    eps    multiplicative accuracy target, 0 < eps < 1
    delta  failure probability for a batch of q queries, 0 < delta < 1
    q      number of simultaneous queries the guarantee covers, q >= 1
    phi    coordinate bound; the domain is [-phi, phi]^d, phi a power of two
    """

    eps: float
    delta: float
    q: int
    phi: int

    def __post_init__(self) -> None:
        if not (isinstance(self.eps, float) and 0.0 < self.eps < 1.0):
            raise ValueError(f"eps must be a float in (0, 1), got {self.eps!r}")
        if not (isinstance(self.delta, float) and 0.0 < self.delta < 1.0):
            raise ValueError(f"delta must be a float in (0, 1), got {self.delta!r}")
        if not (isinstance(self.q, int) and self.q >= 1):
            raise ValueError(f"q must be a positive integer, got {self.q!r}")
        if not (isinstance(self.phi, int) and is_power_of_two(self.phi)):
            raise ValueError(f"phi must be a positive power of two, got {self.phi!r}")

    def top_level(self, d: int) -> int:
        """Smallest L >= 0 with 4^L >= 4 * phi^2 * d.

        This is the ceiling of log2(2 * sqrt(d) * phi) computed without
        floating point: the coarsest scale certain to cover the diameter of
        the whole domain.
        """
        target = 4 * self.phi * self.phi * d
        level = 0
        while 4**level < target:
            level += 1
        return level

    def validate_for(self, n: int, d: int) -> None:
        if self.q > n:
            raise ValueError(f"q={self.q} exceeds the number of points n={n}")
        if d > n:
            raise ValueError(f"dimension d={d} exceeds n={n}; the guarantees assume d <= n")


class PointSet:
    """n distinct integer points in [-phi, phi]^d, stored as int64."""

    def __init__(self, x: np.ndarray, phi: int) -> None:
        if not (isinstance(phi, int) and is_power_of_two(phi)):
            raise ValueError(f"phi must be a positive power of two, got {phi!r}")
        arr = np.asarray(x)
        if arr.ndim != 2:
            raise ValueError(f"points must be a 2-d array, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"need at least one point and one dimension, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            rounded = np.rint(arr)
            if not np.array_equal(rounded, arr):
                raise ValueError("coordinates must be integers")
            arr = rounded
        arr = np.ascontiguousarray(arr, dtype=np.int64)
        if arr.min() < -phi or arr.max() > phi:
            raise DomainError(f"coordinates must lie in [-{phi}, {phi}]")
        if np.unique(arr, axis=0).shape[0] != arr.shape[0]:
            raise ValueError("duplicate points are not allowed; the input is a set")
        self.x = arr
        self.phi = phi

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def __repr__(self) -> str:
        return f"PointSet(n={self.n}, d={self.d}, phi={self.phi})"


@dataclass(frozen=True)
class GridNet:
    """Uniform grid over [-phi, phi]^d with 2^halvings cells per axis.

    Cell side is 2*phi / 2^halvings, an exact power of two. Cells are
    half-open [corner, corner + side) per axis, closed at the upper domain
    boundary. Corner j on an axis sits at -phi + j * side.
    """

    phi: int
    d: int
    halvings: int

    @property
    def side(self) -> float:
        return math.ldexp(2.0 * self.phi, -self.halvings)

    @property
    def cells_per_axis(self) -> int:
        return 1 << self.halvings

    def corner(self, cells: np.ndarray) -> np.ndarray:
        return np.asarray(cells, dtype=np.float64) * self.side - self.phi

    def snap(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Snap each point to the closest corner of the cell containing it.

        Returns (cells, corners): integer corner indices and their
        coordinates. Per axis, a fractional part above one half rounds up and
        exactly one half rounds down, which makes the snapped corner the
        lexicographically smallest of the nearest corners.
        """
        pts = np.asarray(x, dtype=np.float64)
        if pts.shape[-1] != self.d:
            raise ValueError(f"expected last axis {self.d}, got shape {pts.shape}")
        if np.any(pts < -self.phi) or np.any(pts > self.phi):
            raise DomainError(f"point outside [-{self.phi}, {self.phi}]^{self.d}")
        t = (pts + self.phi) / self.side
        j = np.floor(t)
        j += (t - j) > 0.5
        cells = j.astype(np.int64)
        return cells, self.corner(cells)


@lru_cache(maxsize=4096)
def grid_for(gamma: float, phi: int, d: int) -> GridNet:
    """Coarsest power-of-two grid whose cell side is at most gamma / sqrt(d).

    The comparison side^2 * d <= gamma^2 runs in exact rational arithmetic on
    the binary64 value of gamma, so a side that meets the bound exactly is
    accepted and every caller resolves the same grid.
    """
    if not (gamma > 0.0 and math.isfinite(gamma)):
        raise ValueError(f"gamma must be positive and finite, got {gamma!r}")
    gamma_sq = Fraction(gamma) ** 2
    for m in range(MAX_GRID_HALVINGS + 1):
        side = Fraction(2 * phi, 1 << m)
        if side * side * d <= gamma_sq:
            return GridNet(phi=phi, d=d, halvings=m)
    raise GridResolutionError(
        f"no grid with at most {MAX_GRID_HALVINGS} halvings reaches resolution {gamma}"
    )


def _axis_bounds(
    grid: GridNet, center_coord: float, resid_sq: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Exact inclusive corner-index range on one axis within a squared radius.

    Starts from float sqrt bounds widened by a two-index guard band, then
    tightens with exact dyadic comparisons, so the result is immune to sqrt
    rounding at closed-ball boundaries.
    """
    side = grid.side
    rt = np.sqrt(np.maximum(resid_sq, 0.0))
    lo = np.ceil((center_coord - rt + grid.phi) / side).astype(np.int64) - 2
    hi = np.floor((center_coord + rt + grid.phi) / side).astype(np.int64) + 2
    np.clip(lo, 0, grid.cells_per_axis, out=lo)
    np.clip(hi, 0, grid.cells_per_axis, out=hi)
    for _ in range(3):
        diff = lo * side - grid.phi - center_coord
        bad = (diff * diff > resid_sq) & (lo <= hi)
        if not bad.any():
            break
        lo += bad
    for _ in range(3):
        diff = hi * side - grid.phi - center_coord
        bad = (diff * diff > resid_sq) & (lo <= hi)
        if not bad.any():
            break
        hi -= bad
    return lo, hi


def expand_prefixes(
    grid: GridNet, axis: int, prefix_resid_sq: np.ndarray, center: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One axis step of ball enumeration.

    Given squared residual budgets of partial corner prefixes, returns
    (parent_index, corner_index, new_resid_sq) for every in-ball extension by
    one coordinate, in lexicographic order.
    """
    lo, hi = _axis_bounds(grid, float(center[axis]), prefix_resid_sq)
    counts = np.maximum(hi - lo + 1, 0)
    parents = np.repeat(np.arange(lo.shape[0]), counts)
    starts = np.cumsum(counts) - counts
    j = np.arange(counts.sum(), dtype=np.int64) - np.repeat(starts, counts) + np.repeat(lo, counts)
    diff = j * grid.side - grid.phi - float(center[axis])
    resid = prefix_resid_sq[parents] - diff * diff
    return parents, j, resid


def enumerate_ball(grid: GridNet, center: np.ndarray, radius: float) -> np.ndarray:
    """All grid corner index vectors within closed distance `radius` of `center`.

    Returns an (m, d) int64 array in lexicographic order. Corner coordinates
    are `grid.corner(result)`.
    """
    center = np.asarray(center, dtype=np.float64)
    if center.shape != (grid.d,):
        raise ValueError(f"center must have shape ({grid.d},), got {center.shape}")
    resid = np.array([float(radius) * float(radius)])
    cells = np.zeros((1, 0), dtype=np.int64)
    for axis in range(grid.d):
        parents, j, resid = expand_prefixes(grid, axis, resid, center)
        cells = np.hstack([cells[parents], j[:, None]])
    return cells


def count_ball(grid: GridNet, center: np.ndarray, radius: float) -> int:
    """Number of grid corners within closed distance `radius` of `center`.

    Same recursion as `enumerate_ball` but the last axis is counted from its
    exact index bounds instead of materialized.
    """
    center = np.asarray(center, dtype=np.float64)
    if center.shape != (grid.d,):
        raise ValueError(f"center must have shape ({grid.d},), got {center.shape}")
    resid = np.array([float(radius) * float(radius)])
    for axis in range(grid.d - 1):
        _, _, resid = expand_prefixes(grid, axis, resid, center)
    lo, hi = _axis_bounds(grid, float(center[-1]), resid)
    return int(np.maximum(hi - lo + 1, 0).sum())


def save_npts_array(path: str | Path, x: np.ndarray, phi: int) -> None:
    """Write raw rows in the .npts layout without the set validation.

    Query batches go through here; unlike data sets they may repeat rows.
    """
    arr = np.ascontiguousarray(np.asarray(x), dtype=np.int64)
    header = struct.pack(
        "<4sHQIq", NPTS_MAGIC, NPTS_VERSION, arr.shape[0], arr.shape[1], phi
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype("<i8").tobytes())


def save_npts(path: str | Path, points: PointSet) -> None:
    save_npts_array(path, points.x, points.phi)


def load_npts_array(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a .npts file as a bare (rows, phi) pair, duplicates allowed."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header_size = struct.calcsize("<4sHQIq")
    if len(blob) < header_size:
        raise ValueError(f"{path}: truncated header")
    magic, version, n, d, phi = struct.unpack_from("<4sHQIq", blob)
    if magic != NPTS_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != NPTS_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    expected = header_size + n * d * 8
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")
    x = np.frombuffer(blob, dtype="<i8", offset=header_size).reshape(n, d)
    return x.copy(), int(phi)


def load_npts(path: str | Path) -> PointSet:
    x, phi = load_npts_array(path)
    return PointSet(x, phi)


def save_points_text(path: str | Path, points: PointSet) -> None:
    with open(path, "w") as fh:
        fh.write(f"{points.n} {points.d} {points.phi}\n")
        for row in points.x:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def load_points_text(path: str | Path) -> PointSet:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ValueError(f"{path}: empty point file")
    n, d, phi = (int(v) for v in lines[0].split())
    rows = [tuple(int(v) for v in ln.split()) for ln in lines[1 : n + 1]]
    if len(rows) != n or any(len(r) != d for r in rows):
        raise ValueError(f"{path}: expected {n} rows of {d} coordinates")
    return PointSet(np.array(rows, dtype=np.int64), phi)
