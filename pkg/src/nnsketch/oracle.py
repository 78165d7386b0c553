"""Ground-truth oracles and instance generators.

Everything the test harness compares against lives here:

1. ``exact_nn`` and ``exact_all_distances`` are brute-force reference
   implementations with no randomness and no approximation; the evaluation
   harness scores sketch answers against them.
2. ``gen_random`` produces seeded integer point sets in three shapes
   (uniform box, Gaussian clusters, planted two-cluster) used throughout
   the Monte Carlo tests.
3. ``gen_hard_instance`` builds the adversarial two-block family in which
   every approximate nearest-neighbor answer reveals one planted support
   bit, together with the full query set and its answer key.

The hard instance works over real vectors; coordinates are scaled by
``phi / 16`` and rounded to integers, and the generator refuses to emit an
instance whose decisive distance gaps did not survive the rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from nnsketch.geometry import PointSet, is_power_of_two

_GEN_TAGS = ("uniform", "clusters", "two-cluster")


def _coords(points: PointSet | np.ndarray) -> np.ndarray:
    if isinstance(points, PointSet):
        return points.x
    arr = np.asarray(points)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d point array, got shape {arr.shape}")
    return arr


def exact_nn(points: PointSet | np.ndarray, y: np.ndarray) -> tuple[int, float]:
    """Exact nearest neighbor of ``y``, ties broken toward the smaller index.

    Returns ``(index, euclidean_distance)``.
    """
    arr = _coords(points)
    if arr.shape[0] == 0:
        raise ValueError("cannot take the nearest neighbor of an empty point set")
    yv = np.asarray(y).reshape(-1)
    if yv.shape[0] != arr.shape[1]:
        raise ValueError(f"query has dimension {yv.shape[0]}, points have {arr.shape[1]}")
    diff = arr.astype(np.int64) - yv.astype(np.int64)[None, :]
    d2 = np.einsum("nd,nd->n", diff, diff)
    best = int(np.argmin(d2))
    return best, math.sqrt(float(d2[best]))


def exact_all_distances(
    points: PointSet | np.ndarray, queries: PointSet | np.ndarray
) -> np.ndarray:
    """Exact q-by-n Euclidean distance matrix in binary64.

    Row ``j`` holds the distances from query ``j`` to every data point.
    Squared distances are accumulated in int64, so they are exact before
    the final square root.
    """
    arr = _coords(points)
    qs = _coords(queries)
    if qs.shape[1] != arr.shape[1]:
        raise ValueError(f"queries have dimension {qs.shape[1]}, points have {arr.shape[1]}")
    diff = qs.astype(np.int64)[:, None, :] - arr.astype(np.int64)[None, :, :]
    d2 = np.einsum("qnd,qnd->qn", diff, diff)
    return np.sqrt(d2.astype(np.float64))


def _dedupe_fill(draw, n: int, d: int, cap: int) -> np.ndarray:
    """Accumulate draws until n distinct rows exist; raise after cap rounds."""
    seen: dict[bytes, np.ndarray] = {}
    for _ in range(cap):
        for row in draw():
            if len(seen) == n:
                break
            seen.setdefault(row.tobytes(), row)
        if len(seen) == n:
            out = np.stack(list(seen.values()))
            assert out.shape == (n, d)
            return out
    raise ValueError(f"could not draw {n} distinct points; the target region is too small")


def gen_random(
    n: int,
    d: int,
    phi: int,
    dist: str = "uniform",
    seed: int = 0,
    *,
    clusters: int = 4,
    spread: float | None = None,
    sep_level: int | None = None,
    sep_eps: float = 0.25,
) -> PointSet:
    """Seeded random integer point set in ``[-phi, phi]^d``.

    ``dist`` selects the shape:

    - ``"uniform"``: coordinates uniform over the whole box.
    - ``"clusters"``: ``clusters`` Gaussian blobs with standard deviation
      ``spread`` (default ``phi / 16``) around uniform centers.
    - ``"two-cluster"``: two tight blobs whose centers sit exactly
      ``2**sep_level`` apart (default ``sep_level = log2(phi) - 1``), each
      with radius at most ``sep_eps * 2**sep_level / 2``, so any hierarchy
      with threshold below the separation keeps them in separate
      components.

    The same ``seed`` always yields the same set.
    """
    if n < 1 or d < 1:
        raise ValueError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    if dist not in _GEN_TAGS:
        raise ValueError(f"unknown distribution {dist!r}; expected one of {_GEN_TAGS}")
    rng = np.random.default_rng(seed)

    if dist == "uniform":
        if n > (2 * phi + 1) ** min(d, 20):
            raise ValueError("box too small to hold n distinct points")
        draw = lambda: rng.integers(-phi, phi + 1, size=(n, d), dtype=np.int64)
        return PointSet(_dedupe_fill(draw, n, d, cap=64), phi)

    if dist == "clusters":
        if clusters < 1:
            raise ValueError(f"need at least one cluster, got {clusters}")
        sigma = float(spread) if spread is not None else phi / 16.0
        if sigma <= 0:
            raise ValueError(f"spread must be positive, got {sigma}")
        centers = rng.integers(-phi // 2, phi // 2 + 1, size=(clusters, d))

        def draw() -> np.ndarray:
            which = rng.integers(0, clusters, size=n)
            offs = np.rint(rng.normal(0.0, sigma, size=(n, d))).astype(np.int64)
            pts = centers[which] + offs
            return np.clip(pts, -phi, phi)

        return PointSet(_dedupe_fill(draw, n, d, cap=64), phi)

    level = sep_level if sep_level is not None else int(math.log2(phi)) - 1
    if not 0 < sep_eps < 1:
        raise ValueError(f"sep_eps must lie in (0, 1), got {sep_eps}")
    sep = 1 << level
    if sep > phi:
        raise ValueError(f"separation 2^{level} does not fit in [-{phi}, {phi}]")
    radius = max(1, int(sep_eps * sep / 2))
    half = sep // 2
    if half + radius > phi:
        raise ValueError(f"two-cluster layout at level {level} overflows the box")
    centers = np.zeros((2, d), dtype=np.int64)
    centers[0, 0] = -half
    centers[1, 0] = sep - half

    def draw() -> np.ndarray:
        which = np.arange(n) % 2
        # Offsets live in a ball of the stated radius so the blob diameter
        # stays below sep_eps * 2^level regardless of d.
        raw = rng.normal(0.0, 1.0, size=(n, d))
        norms = np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1e-12)
        scale = rng.uniform(0.0, radius, size=(n, 1))
        offs = np.rint(raw / norms * scale).astype(np.int64)
        return centers[which] + offs

    return PointSet(_dedupe_fill(draw, n, d, cap=256), phi)


@dataclass(frozen=True)
class HardInstance:
    """Adversarial instance in which nearest-neighbor answers leak bits.

    The point set holds ``2n`` points: for each ``i`` a sparse point
    ``x_i`` (index ``i``) whose support encodes ``k`` planted positions,
    and a decoy ``z_i`` (index ``n + i``). Every query ``y_ij`` probes one
    position ``j``: its exact nearest neighbor is ``x_i`` when ``j`` is in
    the support and ``z_i`` otherwise, and the two cases are separated by
    a multiplicative gap wide enough to survive a (1 + eps/8)-approximate
    answer.

    ``key`` has one row ``(i, j, expected_index)`` per query, in the same
    order as ``queries``.
    """

    points: PointSet
    queries: np.ndarray
    key: np.ndarray
    n: int
    k: int
    eps: float
    scale: int

    @property
    def d(self) -> int:
        return self.points.d


def gen_hard_instance(n: int, eps: float, seed: int = 0, *, phi: int = 4096) -> HardInstance:
    """Build the planted-support instance for ``n`` messages at accuracy ``eps``.

    Construction, before scaling: dimension ``d = n + 1 + log2(n)`` splits
    into a first block of ``n`` coordinates, one pivot coordinate, and a
    ``log2(n)`` identifier block.

    - ``x_i``: ``1/sqrt(k)`` on a seeded ``k``-subset of the first block
      (``k = ceil(1/eps^2)``), ``0`` at the pivot, ``10 * bit`` per
      identifier coordinate.
    - ``z_i``: zero first block, ``sqrt(1 - eps)`` at the pivot, the same
      identifier block.
    - ``y_ij``: ``1`` at first-block coordinate ``j``, zero pivot, the
      identifier block of ``i``.

    Then ``|x_i - y_ij|^2`` is ``2 - 2*eps`` when ``x_i(j) != 0`` and ``2``
    otherwise, ``|z_i - y_ij|^2 = 2 - eps`` sits strictly between, and any
    pair with different identifiers is at distance at least 10. Each ``i``
    gets ``k`` seeded probe positions (independent of the support), for
    ``n * k`` queries total.

    Coordinates are scaled by ``phi / 16`` and rounded; the generator
    raises if the rounded gaps no longer separate the two cases under a
    (1 + eps/8) approximation factor.
    """
    if not (isinstance(n, int) and n >= 2 and is_power_of_two(n)):
        raise ValueError(f"n must be a power of two at least 2, got {n!r}")
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    k = math.ceil(1.0 / (eps * eps))
    if k > n:
        raise ValueError(f"need 1/eps^2 <= n, got k={k} > n={n}")
    if not (isinstance(phi, int) and is_power_of_two(phi) and phi >= 16):
        raise ValueError(f"phi must be a power of two at least 16, got {phi!r}")

    bits = int(math.log2(n))
    d = n + 1 + bits
    scale = phi // 16

    sparse_val = round(scale / math.sqrt(k))
    pivot_val = round(scale * math.sqrt(1.0 - eps))
    unit_val = scale
    id_val = 10 * scale

    # Decisive squared distances after rounding; the approximation margin
    # must keep hit < decoy < miss or bit recovery is no longer forced.
    d2_hit = (unit_val - sparse_val) ** 2 + (k - 1) * sparse_val**2
    d2_decoy = unit_val**2 + pivot_val**2
    d2_miss = unit_val**2 + k * sparse_val**2
    margin = (1.0 + eps / 8.0) ** 2
    if not (margin * d2_hit < d2_decoy and margin * d2_decoy < d2_miss):
        raise ValueError(
            f"phi={phi} is too small: rounding at scale {scale} destroys the "
            f"hard-instance gap ({d2_hit}, {d2_decoy}, {d2_miss}); increase phi"
        )

    rng = np.random.default_rng(seed)
    ids = np.zeros((n, bits), dtype=np.int64)
    for b in range(bits):
        ids[:, b] = (np.arange(n) >> b) & 1
    ids *= id_val

    xs = np.zeros((n, d), dtype=np.int64)
    zs = np.zeros((n, d), dtype=np.int64)
    supports = np.zeros((n, k), dtype=np.int64)
    for i in range(n):
        supp = np.sort(rng.choice(n, size=k, replace=False))
        supports[i] = supp
        xs[i, supp] = sparse_val
        xs[i, n + 1 :] = ids[i]
        zs[i, n] = pivot_val
        zs[i, n + 1 :] = ids[i]

    queries = np.zeros((n * k, d), dtype=np.int64)
    key = np.zeros((n * k, 3), dtype=np.int64)
    row = 0
    for i in range(n):
        probes = np.sort(rng.choice(n, size=k, replace=False))
        for j in probes:
            queries[row, j] = unit_val
            queries[row, n + 1 :] = ids[i]
            expected = i if j in supports[i] else n + i
            key[row] = (i, j, expected)
            row += 1

    points = PointSet(np.vstack([xs, zs]), phi)
    return HardInstance(
        points=points, queries=queries, key=key, n=n, k=k, eps=eps, scale=scale
    )


def save_key(path: str | Path, instance: HardInstance) -> None:
    """Write the answer key as text: a ``"n k"`` header, then one
    ``"i j expected_index"`` line per query in order."""
    lines = [f"{instance.n} {instance.k}"]
    lines.extend(f"{i} {j} {e}" for i, j, e in instance.key)
    Path(path).write_text("\n".join(lines) + "\n")


def load_key(path: str | Path) -> tuple[int, int, np.ndarray]:
    """Read a ``.key`` file back as ``(n, k, rows)`` with rows shaped (n*k, 3)."""
    text = Path(path).read_text().strip().splitlines()
    if not text:
        raise ValueError(f"{path}: empty answer key")
    head = text[0].split()
    if len(head) != 2:
        raise ValueError(f"{path}: malformed header {text[0]!r}")
    n, k = int(head[0]), int(head[1])
    rows = np.array([[int(f) for f in line.split()] for line in text[1:]], dtype=np.int64)
    if rows.shape != (n * k, 3):
        raise ValueError(f"{path}: expected {n * k} key rows, found {rows.shape[0]}")
    return n, k, rows
