"""Randomly shifted quadtree sketch with middle-out path compression.

An alternative engine that trades the hashed-cell machinery of the main
pipeline for an explicit tree over one randomly shifted dyadic grid:

1. A shift ``sigma``, uniform over {-phi..phi}^d, is drawn from the
   sketch seed.  Points are translated by ``2*phi - sigma`` so every
   coordinate is a nonnegative integer, then rescaled by ``2**lam`` so
   that cell arithmetic below the unit scale stays integral.
2. The dyadic hierarchy over the translated domain is materialized from
   a single root cell down to level ``-lam``, where a cell pins its
   point exactly.  Each retained edge stores d bits, one per axis,
   saying whether the child occupies the lower (0) or upper (1) half of
   the parent cell along that axis.
3. Maximal single-child runs longer than ``2*lam`` edges keep their
   first ``lam`` and last ``lam`` edges; the middle is replaced by one
   long edge annotated only with its length.  The receiver refills the
   dropped child-position bits from the query point's own binary
   expansion, and the random shift makes those bits agree with the
   sketched point whenever the query is close enough for the answer to
   matter.

Concatenating edge bits from the root to any node reachable without
crossing a long edge therefore reproduces the binary expansion of the
node's cell corner, which doubles as the point surrogate.  Queries
reconstruct all n leaf corners in a few vectorized passes over arrays
cached on the sketch, so lookups cost O(n*d) after the first call.

Distance payloads are deliberately unsupported here; this engine
answers nearest-neighbor queries only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from nnsketch.distsketch import JLPreproc
from nnsketch.geometry import Params, PointSet
from nnsketch.hashing import seeded_values

_STREAM_SHIFT = 6


def shift_amount(d: int, phi: int, eps: float, delta: float) -> int:
    """Grid refinement depth below the unit scale.

    Chosen so that a union bound over axes and levels leaves at most
    ``delta`` probability that any relevant cell boundary lands within
    the padding radius of a sketched point.
    """
    spread = 16.0 * d**1.5 * max(1.0, math.log2(phi)) / (eps * delta)
    return max(1, math.ceil(math.log2(spread)))


def draw_shift(seed: int, d: int, phi: int) -> np.ndarray:
    vals = seeded_values(seed, d, stream=_STREAM_SHIFT)
    return (vals % np.uint64(2 * phi + 1)).astype(np.int64) - phi


def scale_coords(x: np.ndarray, phi: int, sigma: np.ndarray, lam: int) -> np.ndarray:
    """Translate into [0, 4*phi]^d and rescale by 2**lam."""
    return (x.astype(np.int64) + 2 * phi - sigma) << lam


class QuadNode:
    """One retained cell. ``bits`` is None exactly on long-edge children."""

    __slots__ = ("level", "bits", "edge_long", "span", "children", "center")

    def __init__(self, level: int) -> None:
        self.level = level
        self.bits: np.ndarray | None = None
        self.edge_long = False
        self.span = 1
        self.children: list[QuadNode] = []
        self.center = -1


def _split(pp: np.ndarray, idx: np.ndarray, level: int, lam: int) -> QuadNode:
    node = QuadNode(level)
    if level == -lam:
        assert idx.size == 1, "unit-scale cells hold exactly one point"
        node.center = int(idx[0])
        return node
    child_level = level - 1
    bits = ((pp[idx] >> (child_level + lam)) & 1).astype(np.uint8)
    if child_level < 0:
        assert not bits.any(), "sub-unit bits of scaled points are zero"
    keys, inverse = np.unique(bits, axis=0, return_inverse=True)
    for g in range(keys.shape[0]):
        child = _split(pp, idx[inverse == g], child_level, lam)
        child.bits = keys[g]
        node.children.append(child)
    node.center = min(c.center for c in node.children)
    return node


def _compress(root: QuadNode, lam: int) -> None:
    """Middle-out: a run of K > 2*lam edges keeps lam at each end."""
    pending = [root]
    while pending:
        u = pending.pop()
        if len(u.children) != 1:
            pending.extend(u.children)
            continue
        path = [u]
        while len(path[-1].children) == 1:
            path.append(path[-1].children[0])
        k = len(path) - 1
        if k > 2 * lam:
            head, tail = path[lam], path[k - lam]
            head.children = [tail]
            tail.edge_long = True
            tail.span = head.level - tail.level
            tail.bits = None
        pending.extend(path[-1].children)


@dataclass
class QuadTree:
    root: QuadNode
    params: Params
    lam: int
    sigma: np.ndarray
    n: int
    d: int
    seed: int
    points: PointSet | None = None
    jl: JLPreproc | None = None
    _leaf_cache: tuple[np.ndarray, np.ndarray] | None = field(
        default=None, repr=False, compare=False
    )

    @property
    def top_level(self) -> int:
        return int(4 * self.params.phi).bit_length()

    def nodes(self):
        """Preorder over retained cells, children in stored order."""
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def leaf_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Per point: stored-bit corner and long-edge fill mask.

        Index k of either array belongs to point k.  The corner carries
        every bit that survived compression on the path to k's leaf;
        the mask flags the bit positions a query must supply.  Both are
        in the scaled coordinate system.
        """
        if self._leaf_cache is None:
            corners = np.zeros((self.n, self.d), dtype=np.int64)
            masks = np.zeros(self.n, dtype=np.int64)
            stack = [(self.root, np.zeros(self.d, dtype=np.int64), 0)]
            seen = 0
            while stack:
                node, corner, mask = stack.pop()
                if not node.children:
                    corners[node.center] = corner
                    masks[node.center] = mask
                    seen += 1
                    continue
                for c in node.children:
                    if c.edge_long:
                        gap = (1 << (node.level + self.lam)) - (
                            1 << (c.level + self.lam)
                        )
                        stack.append((c, corner, mask | gap))
                    else:
                        shifted = c.bits.astype(np.int64) << (c.level + self.lam)
                        stack.append((c, corner | shifted, mask))
            assert seen == self.n
            self._leaf_cache = (corners, masks)
        return self._leaf_cache

    def recover_points(self, y: np.ndarray) -> np.ndarray:
        """Per-point position estimates read off the tree for query y.

        Row k reproduces point k exactly whenever no long edge on its
        path disagrees with y's expansion; in particular feeding a
        sketched point back recovers it verbatim.
        """
        corners, masks = self.leaf_arrays()
        yq = scale_coords(y, self.params.phi, self.sigma, self.lam)
        filled = corners | (yq[None, :] & masks[:, None])
        return (filled >> self.lam) - 2 * self.params.phi + self.sigma


def build_quadtree(
    points: PointSet, params: Params, seed: int = 0, *, validate: bool = True
) -> QuadTree:
    """Sender-side construction of the shifted-quadtree sketch.

    The refinement depth is sized for all q queries jointly, so the
    per-query failure budget is ``delta / q``.
    """
    if validate:
        params.validate_for(points.n, points.d)
    lam = shift_amount(points.d, params.phi, params.eps, params.delta / params.q)
    sigma = draw_shift(seed, points.d, params.phi)
    pp = scale_coords(points.x, params.phi, sigma, lam)
    top = int(4 * params.phi).bit_length()
    assert int(pp.max()) < (1 << (top + lam))
    root = _split(pp, np.arange(points.n, dtype=np.int64), top, lam)
    _compress(root, lam)
    return QuadTree(
        root=root,
        params=params,
        lam=lam,
        sigma=sigma,
        n=points.n,
        d=points.d,
        seed=seed,
        points=points,
    )


def padding_cut_rate(
    x: np.ndarray, eps: float, delta: float, phi: int, shifts: int = 500, seed: int = 0
) -> float:
    """Monte Carlo estimate of the padding failure probability.

    A shift fails if some level's cell boundary cuts the ball of radius
    ``8 * 2**(level - lam) * sqrt(d) / eps`` around x.  Levels whose
    ball radius falls below one are skipped: the closed ball then
    contains no integer point other than x itself, so no second point
    can be separated from x by that boundary.
    """
    x = np.asarray(x, dtype=np.int64)
    d = x.size
    lam = shift_amount(d, phi, eps, delta)
    top = int(4 * phi).bit_length()
    rng = np.random.default_rng(seed)
    cut = 0
    for _ in range(shifts):
        sigma = rng.integers(-phi, phi + 1, size=d)
        pp = scale_coords(x, phi, sigma, lam)
        for level in range(top, -lam - 1, -1):
            rho = 8.0 * math.sqrt(d) * math.ldexp(1.0, level - lam) / eps
            if rho < 1.0:
                break
            radius = rho * math.ldexp(1.0, lam)
            side = math.ldexp(1.0, level + lam)
            pos = (pp & ((1 << (level + lam)) - 1)).astype(np.float64)
            if np.any(pos < radius) or np.any(pos + radius >= side):
                cut += 1
                break
    return cut / shifts
