"""Black-box distance machinery: sign projections and fixed-scale range sketches.

Three consumers share this module:

1. The distance extension of the tree sketch stores, per subtree root r, a
   quantized sign-projection of the root's center and a torus-quantized range
   payload at scale 2^level(r). `attach_distances` computes both.
2. The optional build-time dimension reduction (`jl_preprocess`) projects the
   input points to O(eps^-2 log(qn/delta)) coordinates, rescales, and rounds
   back to integers so the rest of the pipeline keeps its exact-integer
   geometry.
3. Monte Carlo contract tests sample fresh seeds per trial; everything here
   is a pure function of (seed, shape), never of library RNG state.

The range sketch wraps each projected coordinate onto a torus of
circumference 8R before quantizing. Coordinate differences up to 4R survive
the wrap exactly, so two payloads can be compared without any shared anchor
point; larger differences alias uniformly and still compare as far apart.
Verdict boundaries on the unpacked distance e are exact and assertable:
Small iff e < (1-eps/2)R, Large iff e > 2(1+eps/2)R, Estimate(e) otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from nnsketch.geometry import DomainError, Params, PointSet
from nnsketch.hashing import mix64, seeded_values

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)

# seeded_values streams, kept distinct from the grid-hash coefficients
# (stream 0 of the tree seed)
_STREAM_SIGN_ROWS = 3
_STREAM_RANGE_SEEDS = 4
_STREAM_DIST_SEED = 5


@lru_cache(maxsize=32)
def sign_matrix(seed: int, rows: int, cols: int) -> np.ndarray:
    """(rows, cols) array of +-1 entries.

    Entry (i, j) is the top bit of mix64(row_key_i + (j+1)*golden), a pure
    function of (seed, i, j): a larger matrix with the same seed extends a
    smaller one, and the matrix is regenerated on demand, never stored.
    """
    row_keys = seeded_values(seed, rows, stream=_STREAM_SIGN_ROWS)
    col_idx = np.arange(1, cols + 1, dtype=np.uint64) * _GOLDEN
    bits = mix64(row_keys[:, None] + col_idx[None, :]) >> np.uint64(63)
    return (2 * bits.astype(np.int8) - 1).copy()


def target_dim(eps: float, delta_prime: float, c: int = 8) -> int:
    """Projection dimension ceil(c * ln(1/delta') / eps^2)."""
    if not 0 < delta_prime < 1:
        raise ValueError(f"failure budget must be in (0, 1), got {delta_prime}")
    return math.ceil(c * math.log(1.0 / delta_prime) / (eps * eps))


@dataclass(frozen=True)
class SignProjection:
    """Distance-preserving projection x -> Mx with entries +-1/sqrt(d_prime)."""

    seed: int
    d_prime: int
    d: int

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d:
            raise ValueError(f"expected {self.d} coordinates, got {x.shape[-1]}")
        m = sign_matrix(self.seed, self.d_prime, self.d).astype(np.float64)
        return x @ m.T / math.sqrt(self.d_prime)


class VerdictKind(Enum):
    SMALL = "small"
    ESTIMATE = "estimate"
    LARGE = "large"


@dataclass(frozen=True)
class RangeVerdict:
    kind: VerdictKind
    value: float

    def exceeds(self, threshold: float) -> bool:
        """Does this verdict assert a distance strictly above `threshold`?"""
        if self.kind is VerdictKind.LARGE:
            return True
        return self.kind is VerdictKind.ESTIMATE and self.value > threshold


@dataclass(frozen=True)
class ScaleSketch:
    """Range sketch at scale R = 2^level: d_prime torus-quantized projections.

    K cells of side 8R/K tile the torus; K = ceil(8 sqrt(d_prime)/eps) makes
    the total quantization error at most eps*R. Payloads are index vectors in
    [0, K)^d_prime, packed at cell_width bits per coordinate by the codec.
    """

    level: int
    eps: float
    d_prime: int
    d: int
    seed: int

    @property
    def radius(self) -> float:
        return math.ldexp(1.0, self.level)

    @property
    def cells(self) -> int:
        return math.ceil(8.0 * math.sqrt(self.d_prime) / self.eps)

    @property
    def cell_width(self) -> int:
        width = math.ceil(math.log2(8.0 * math.sqrt(self.d_prime) / self.eps + 1.0))
        if self.cells > (1 << width):
            raise AssertionError("cell count exceeds its declared bit width")
        return width

    @property
    def step(self) -> float:
        return 8.0 * self.radius / self.cells

    def wrap(self, v: np.ndarray) -> np.ndarray:
        """Torus-quantize an already-projected vector to cell indices."""
        r = self.radius
        t = np.mod(np.asarray(v, dtype=np.float64) + 4.0 * r, 8.0 * r)
        return np.rint(t / self.step).astype(np.int64) % self.cells

    def sketch_vector(self, x: np.ndarray) -> np.ndarray:
        proj = SignProjection(self.seed, self.d_prime, self.d)
        return self.wrap(proj.apply(x))

    def compare(self, pa: np.ndarray, pb: np.ndarray) -> RangeVerdict:
        if pa.shape != (self.d_prime,) or pb.shape != (self.d_prime,):
            raise ValueError("payloads do not match this sketch's dimensions")
        dw = (pa - pb) % self.cells
        dw = np.minimum(dw, self.cells - dw)
        e = float(np.linalg.norm(dw * self.step))
        r = self.radius
        if e < (1.0 - self.eps / 2.0) * r:
            return RangeVerdict(VerdictKind.SMALL, e)
        if e > 2.0 * (1.0 + self.eps / 2.0) * r:
            return RangeVerdict(VerdictKind.LARGE, e)
        return RangeVerdict(VerdictKind.ESTIMATE, e)


@dataclass(frozen=True)
class DistParams:
    """Dimensions of the distance extension, derived from the failure budget.

    The plain projection answers one comparison per query (budget delta/q);
    the per-level range sketches answer one comparison per traversed level
    (budget delta/(q*num_levels)).
    """

    eps: float
    delta: float
    q: int
    num_levels: int
    c: int = 8

    @property
    def proj_dim(self) -> int:
        return target_dim(self.eps, self.delta / self.q, self.c)

    @property
    def range_dim(self) -> int:
        return target_dim(self.eps, self.delta / (self.q * self.num_levels), self.c)

    def center_step(self, level: int) -> float:
        """Quantization step for stored projected centers at a root's level."""
        return math.ldexp(self.eps, level) / (8.0 * math.sqrt(self.proj_dim))


def range_seed(seed: int, level: int, num_levels: int) -> int:
    """Per-level seed for the range sketches, derived from the section seed."""
    if not 0 <= level < num_levels:
        raise ValueError(f"level {level} outside 0..{num_levels - 1}")
    return int(seeded_values(seed, num_levels, stream=_STREAM_RANGE_SEEDS)[level])


@dataclass
class DistSection:
    """Per-subtree-root distance payloads, in subtree-root preorder.

    qproj[i] holds the quantized projected center of root i (step depends on
    the root's level); range_cells[i] holds its torus payload at the root's
    own scale.
    """

    seed: int
    params: DistParams
    qproj: list[np.ndarray]
    range_cells: list[np.ndarray]

    def dequantized(self, i: int, level: int) -> np.ndarray:
        return self.qproj[i] * self.params.center_step(level)


def attach_distances(tree, c: int = 8) -> DistSection:
    """Compute and attach the distance extension to a built tree."""
    if tree.points is None:
        raise ValueError("distance payloads require the original points")
    params: Params = tree.params
    num_levels = params.top_level(tree.d) + 1
    dp = DistParams(params.eps, params.delta, params.q, num_levels, c)
    seed = int(seeded_values(tree.seed, 1, stream=_STREAM_DIST_SEED)[0])
    proj = SignProjection(seed, dp.proj_dim, tree.d)
    x = tree.points.x.astype(np.float64)

    qproj: list[np.ndarray] = []
    range_cells: list[np.ndarray] = []
    for root in tree.subtree_roots:
        center = x[root.center]
        v = proj.apply(center)
        qproj.append(np.rint(v / dp.center_step(root.level)).astype(np.int64))
        sk = ScaleSketch(
            root.level, params.eps, dp.range_dim, tree.d,
            range_seed(seed, root.level, num_levels),
        )
        range_cells.append(sk.sketch_vector(center))
    tree.dist = DistSection(seed, dp, qproj, range_cells)
    return tree.dist


@dataclass(frozen=True)
class JLPreproc:
    """Build-time dimension reduction: project, rescale, round to integers.

    Queries must pass through `transform` before touching the sketch; returned
    distance estimates are divided by `scale` to land back in input units.
    """

    seed: int
    orig_d: int
    orig_phi: int
    target_d: int
    scale: int

    @property
    def new_phi(self) -> int:
        bound = math.ceil(
            self.orig_d * self.orig_phi * self.scale / math.sqrt(self.target_d)
        )
        return 1 << max(0, (bound - 1).bit_length())

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[-1] != self.orig_d:
            raise ValueError(f"expected {self.orig_d} coordinates, got {x.shape[-1]}")
        if np.abs(x).max(initial=0) > self.orig_phi:
            raise DomainError(f"coordinates exceed the original bound {self.orig_phi}")
        proj = SignProjection(self.seed, self.target_d, self.orig_d)
        out = np.rint(proj.apply(x) * self.scale).astype(np.int64)
        if np.abs(out).max(initial=0) > self.new_phi:
            raise AssertionError("projected coordinates escaped the derived bound")
        return out


def jl_preprocess(
    points: PointSet, params: Params, seed: int, c: int = 8
) -> tuple[PointSet, Params, JLPreproc]:
    """Reduce the input dimension before building; returns the new embedding."""
    d_t = target_dim(params.eps, params.delta / (params.q * points.n), c)
    pre = JLPreproc(
        seed=seed,
        orig_d=points.d,
        orig_phi=points.phi,
        target_d=d_t,
        scale=math.ceil(math.sqrt(d_t) / params.eps),
    )
    projected = PointSet(pre.transform(points.x), pre.new_phi)
    new_params = Params(params.eps, params.delta, params.q, pre.new_phi)
    return projected, new_params, pre
