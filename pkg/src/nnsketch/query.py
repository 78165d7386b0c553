"""Query side of the exact engine: surrogate recovery, ANN, and distances.

Surrogate recovery reverses the stored root hash: enumerate every corner of
the root-level grid within 2 * 2^level of the query and keep the one whose
hash matches. Enumeration and hashing are fused axis by axis, so candidate
vectors are never materialized except for the single match, which is
recovered by backtracking the per-axis expansion trail. Zero or multiple
matches fall back to an origin-based root surrogate; the traversal then
proceeds on (useless but well-defined) surrogates, which is exactly the
low-probability failure event the hash width was budgeted for.

The ANN traversal and the distance queries share one trace: the descending
chain of subtree roots, the per-subtree surrogate maps, and the chosen leaf
per subtree. Distance estimation scans the chain with the per-level range
sketches to find the first root whose scale test says the query has parted
ways, then answers each target either from the projected centers (target and
query part ways together) or from a surrogate near the target (target parts
ways earlier).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from nnsketch.distsketch import ScaleSketch, SignProjection, range_seed
from nnsketch.geometry import DomainError, expand_prefixes, grid_for
from nnsketch.hashing import fold_m61
from nnsketch.hierarchy import Node, SketchTree, surrogate_step
from nnsketch.quadtree import QuadTree


class CapabilityError(ValueError):
    """The sketch was built without the section this query needs."""


@dataclass
class QueryTrace:
    """Everything one query learned while descending the long-edge chain."""

    roots: list[Node] = field(default_factory=list)
    surrogates: list[dict[Node, np.ndarray]] = field(default_factory=list)
    recovered: list[bool] = field(default_factory=list)
    chosen: list[Node] = field(default_factory=list)
    t: int | None = None


def validate_query(y, phi: int, d: int) -> np.ndarray:
    """Check one query point against the sketch's embedding; return int64."""
    arr = np.asarray(y)
    if arr.shape != (d,):
        raise ValueError(f"query must have shape ({d},), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        rounded = np.rint(np.asarray(arr, dtype=np.float64))
        if not np.array_equal(rounded, arr):
            raise ValueError("query coordinates must be integers")
        arr = rounded
    out = arr.astype(np.int64)
    if np.abs(out).max(initial=0) > phi:
        raise DomainError(f"query outside [-{phi}, {phi}]^{d}")
    return out


def recover_root_cells(tree: SketchTree, root: Node, y: np.ndarray) -> np.ndarray | None:
    """Cell vector of the unique ball corner matching the stored hash, or None."""
    grid = grid_for(math.ldexp(1.0, root.level), tree.params.phi, tree.d)
    radius = math.ldexp(2.0, root.level)
    resid = np.array([radius * radius])
    acc = np.zeros(1, dtype=np.uint64)
    trail = []
    for axis in range(tree.d):
        parents, j, resid = expand_prefixes(grid, axis, resid, y)
        acc = fold_m61(acc[parents] + tree.hashes.axis_term(root.level, axis, j))
        trail.append((parents, j))
    final = tree.hashes.finalize(root.level, acc)
    hits = np.nonzero(final == np.uint64(root.root_hash))[0]
    if hits.shape[0] != 1:
        return None
    idx = int(hits[0])
    cells = np.empty(tree.d, dtype=np.int64)
    for axis in range(tree.d - 1, -1, -1):
        parents, j = trail[axis]
        cells[axis] = j[idx]
        idx = int(parents[idx])
    return cells


def recover_surrogates(
    tree: SketchTree, root: Node, y: np.ndarray
) -> tuple[dict[Node, np.ndarray], bool]:
    """Surrogates for every node of one subtree, in replay (preorder) order."""
    grid = grid_for(math.ldexp(1.0, root.level), tree.params.phi, tree.d)
    cells = recover_root_cells(tree, root, y)
    ok = cells is not None
    surr: dict[Node, np.ndarray] = {
        root: grid.corner(cells) if ok else np.zeros(tree.d, dtype=np.float64)
    }
    eps = tree.params.eps
    stack = [c for c in reversed(root.children) if not c.edge_long]
    while stack:
        v = stack.pop()
        gamma0 = 1.0 / (5 + v.k_code)
        gamma = gamma0 * eps if v.subtree_leaf else gamma0
        net = grid_for(gamma, tree.params.phi, tree.d)
        corner = net.corner(v.zeta + (1 << (net.halvings - 1)))
        surr[v] = surr[v.ingress] + corner * surrogate_step(v.level, v.k_code)
        stack.extend(reversed([c for c in v.children if not c.edge_long]))
    return surr, ok


def _traverse(tree: SketchTree, y: np.ndarray) -> tuple[int, QueryTrace]:
    yf = y.astype(np.float64)
    trace = QueryTrace()
    node = tree.root
    while True:
        surr, ok = recover_surrogates(tree, node, yf)
        trace.roots.append(node)
        trace.surrogates.append(surr)
        trace.recovered.append(ok)
        best = None
        best_key = None
        for v, s in surr.items():
            if not v.subtree_leaf:
                continue
            diff = yf - s
            key = (float(diff @ diff), v.center)
            if best_key is None or key < best_key:
                best, best_key = v, key
        trace.chosen.append(best)
        if best.children:  # heads a long edge: descend to the subtree below
            node = best.children[0]
            if node.level >= best.level:
                raise AssertionError("traversal must descend strictly")
        else:
            return best.center, trace


@dataclass
class QuadTrace:
    """Recovered per-point position estimates behind a quadtree answer."""

    estimates: np.ndarray
    chosen: int


def _quadtree_ann(sketch: QuadTree, y: np.ndarray) -> tuple[int, QuadTrace]:
    estimates = sketch.recover_points(y)
    diff = (estimates - y[None, :]).astype(np.float64)
    d2 = np.einsum("ij,ij->i", diff, diff)
    best = int(np.argmin(d2))
    return best, QuadTrace(estimates=estimates, chosen=best)


def query_ann(sketch, y) -> tuple[int, QueryTrace]:
    """Index of an approximate nearest neighbor of y, plus the trace."""
    if isinstance(sketch, QuadTree):
        if sketch.jl is not None:
            y = validate_query(y, sketch.jl.orig_phi, sketch.jl.orig_d)
            y = sketch.jl.transform(y)
        else:
            y = validate_query(y, sketch.params.phi, sketch.d)
        return _quadtree_ann(sketch, y)
    if not isinstance(sketch, SketchTree):
        raise TypeError(f"expected a tree sketch, got {type(sketch).__name__}")
    if sketch.jl is not None:
        y = validate_query(y, sketch.jl.orig_phi, sketch.jl.orig_d)
        y = sketch.jl.transform(y)
    else:
        y = validate_query(y, sketch.params.phi, sketch.d)
    return _traverse(sketch, y)


def _distance_context(sketch: SketchTree, y: np.ndarray):
    """Shared per-query state: trace, threshold index t, Case I value."""
    dist = sketch.dist
    if dist is None:
        raise CapabilityError("sketch was built without distance payloads")
    _, trace = _traverse(sketch, y)
    yf = y.astype(np.float64)
    dp = dist.params
    root_index = {node: i for i, node in enumerate(sketch.subtree_roots)}

    t = len(trace.roots)
    level_cells: dict[int, np.ndarray] = {}
    for j, r in enumerate(trace.roots):
        sk = ScaleSketch(
            r.level, dp.eps, dp.range_dim, sketch.d,
            range_seed(dist.seed, r.level, dp.num_levels),
        )
        if r.level not in level_cells:
            level_cells[r.level] = sk.sketch_vector(yf)
        verdict = sk.compare(dist.range_cells[root_index[r]], level_cells[r.level])
        if verdict.exceeds(math.ldexp(1.0, r.level)):
            t = j
            break
    trace.t = t

    shared = None
    if t < len(trace.roots):
        rt = trace.roots[t]
        my = SignProjection(dist.seed, dp.proj_dim, sketch.d).apply(yf)
        shared = float(np.linalg.norm(my - dist.dequantized(root_index[rt], rt.level)))
    sketch.ensure_members()
    return trace, t, shared, yf


def _estimate_for(sketch: SketchTree, trace: QueryTrace, t: int, shared, yf, k: int) -> float:
    j_max = min(t, len(trace.roots) - 1)
    t_k = None
    for j in range(j_max, -1, -1):
        members = trace.roots[j].members
        pos = int(np.searchsorted(members, k))
        if pos < members.shape[0] and int(members[pos]) == k:
            t_k = j
            break
    if t_k is None:
        raise AssertionError("the top root must contain every point")
    if t_k == t:
        return shared
    node = trace.roots[t_k]
    while not node.subtree_leaf:
        for child in node.children:
            members = child.members
            pos = int(np.searchsorted(members, k))
            if pos < members.shape[0] and int(members[pos]) == k:
                node = child
                break
        else:
            raise AssertionError("target vanished from its own cluster")
    est = float(np.linalg.norm(yf - trace.surrogates[t_k][node]))
    if est + 1.5 * sketch.params.eps * math.ldexp(1.0, node.level) < 1.0:
        # integrality: the true distance is below 1, hence exactly 0
        return 0.0
    return est


def query_distance(sketch, k: int, y) -> float:
    """Estimate of the distance from y to point k, multiplicatively accurate."""
    if isinstance(sketch, QuadTree):
        raise CapabilityError("the quadtree engine does not carry distance payloads")
    if not isinstance(sketch, SketchTree):
        raise TypeError(f"expected a tree sketch, got {type(sketch).__name__}")
    if not 0 <= k < sketch.n:
        raise IndexError(f"point index {k} outside 0..{sketch.n - 1}")
    if sketch.jl is not None:
        y = validate_query(y, sketch.jl.orig_phi, sketch.jl.orig_d)
        y = sketch.jl.transform(y)
    else:
        y = validate_query(y, sketch.params.phi, sketch.d)
    trace, t, shared, yf = _distance_context(sketch, y)
    value = _estimate_for(sketch, trace, t, shared, yf, k)
    if sketch.jl is not None:
        value /= sketch.jl.scale
    return value


def query_all_distances(sketch, y) -> np.ndarray:
    """Estimates of all n distances from y, sharing one traversal."""
    if isinstance(sketch, QuadTree):
        raise CapabilityError("the quadtree engine does not carry distance payloads")
    if not isinstance(sketch, SketchTree):
        raise TypeError(f"expected a tree sketch, got {type(sketch).__name__}")
    if sketch.jl is not None:
        y = validate_query(y, sketch.jl.orig_phi, sketch.jl.orig_d)
        y = sketch.jl.transform(y)
    else:
        y = validate_query(y, sketch.params.phi, sketch.d)
    trace, t, shared, yf = _distance_context(sketch, y)
    out = np.empty(sketch.n, dtype=np.float64)
    for k in range(sketch.n):
        out[k] = _estimate_for(sketch, trace, t, shared, yf, k)
    if sketch.jl is not None:
        out /= sketch.jl.scale
    return out
