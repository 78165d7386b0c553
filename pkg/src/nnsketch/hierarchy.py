"""Threshold hierarchy with path compression and quantized surrogates.

The sketch's tree side is built in four passes:

1. `threshold_hierarchy` clusters the points at every scale 2^l: level 0 is
   one singleton cluster per point, and level l takes connected components of
   the "some pair within 2^l" graph over the level l-1 clusters. Every level
   up to the domain-covering scale is materialized, so single-child chains
   are explicit.
2. `compress` shortens each maximal chain of single-child nodes from the top:
   a chain of k edges keeps its bottom `budget` edges (a function of the
   cluster diameter, the bottom level, and eps) and replaces the rest by one
   long edge. Removing long edges cuts the tree into subtrees.
3. `assign_ingresses` picks, for every node that is not a subtree root, an
   earlier-processed node whose surrogate anchors its own: the first child of
   v (the one sharing v's center) anchors to v, and each later child anchors
   to a subtree leaf found by walking down toward the closest point in the
   already-processed sibling branch. Children are reordered so a preorder
   walk always sees the anchor before the node.
4. `compute_surrogates` snaps each center to a nearby grid corner: subtree
   roots directly on the grid with resolution 2^level (these are stored as
   per-level hashes and recovered by enumeration), everyone else as a small
   quantized displacement from its anchor's surrogate. The scale factor
   1/(5 + ceil(diam/2^level)) keeps every displacement inside the unit ball,
   and the quantizer resolution carries the eps factor for subtree leaves, so
   a leaf surrogate lands within eps * 2^level / 2 of its center while
   non-leaf surrogates stay within 2^level / 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from math import isqrt

import numpy as np

from nnsketch.geometry import Params, PointSet, grid_for
from nnsketch.hashing import GridHashes, hash_width


class UnionFind:
    """Disjoint sets over range(n) with path compression and union by size."""

    def __init__(self, n: int) -> None:
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]


class Node:
    """One cluster of the hierarchy, before or after compression.

    `children` are in storage order (anchor-first after ingress assignment);
    `edge_long` marks that the edge from the parent skips levels, making this
    node a subtree root. Build-only fields (`members`, `diam_sq`) hold the
    sorted point indices of the cluster and its exact squared diameter; on
    the decode side `members` is reconstructed from leaf centers.
    """

    __slots__ = (
        "level",
        "children",
        "parent",
        "edge_long",
        "center",
        "k_code",
        "zeta",
        "ingress",
        "root_hash",
        "is_subtree_root",
        "members",
        "diam_sq",
        "cells",
        "surrogate",
    )

    def __init__(self, level: int, center: int = -1) -> None:
        self.level = level
        self.children: list[Node] = []
        self.parent: Node | None = None
        self.edge_long = False
        self.center = center
        self.k_code: int | None = None
        self.zeta: np.ndarray | None = None
        self.ingress: Node | None = None
        self.root_hash: int | None = None
        self.is_subtree_root = False
        self.members: np.ndarray | None = None
        self.diam_sq: int = 0
        self.cells: np.ndarray | None = None
        self.surrogate: np.ndarray | None = None

    @property
    def subtree_leaf(self) -> bool:
        """No child within the same subtree (a point leaf or a long-edge head)."""
        return all(c.edge_long for c in self.children)

    @property
    def edge_len(self) -> int:
        if self.parent is None:
            return 0
        return self.parent.level - self.level

    def __repr__(self) -> str:
        kind = "root" if self.is_subtree_root else "node"
        return f"<{kind} level={self.level} center={self.center} children={len(self.children)}>"


def pairwise_sq(x: np.ndarray) -> np.ndarray:
    """Exact squared euclidean distances between rows of an int64 array."""
    g = x @ x.T
    norms = np.diag(g)
    return norms[:, None] + norms[None, :] - 2 * g


def preorder(root: Node) -> list[Node]:
    out: list[Node] = []
    stack = [root]
    while stack:
        v = stack.pop()
        out.append(v)
        stack.extend(reversed(v.children))
    return out


def diam_code(diam_sq: int, level: int) -> int:
    """Smallest integer k with (k * 2^level)^2 >= diam_sq."""
    scale = 4**level
    k = isqrt(diam_sq // scale)
    while k * k * scale < diam_sq:
        k += 1
    return k


def topout_budget(diam_sq: int, level: int, eps: float) -> int:
    """Chain edges kept above a path bottom: ceil(log2(diam / (2^level * eps))).

    Zero for a zero-diameter cluster; the comparison runs on exact rationals
    so the boundary case keeps the guarantee diam <= eps * 2^(level + budget).
    """
    if diam_sq == 0:
        return 0
    eps_sq = Fraction(eps) ** 2
    budget = 0
    while eps_sq * (4 ** (budget + level)) < diam_sq:
        budget += 1
        if budget > 500:
            raise AssertionError("compression budget failed to converge")
    return budget


def threshold_hierarchy(
    points: PointSet, params: Params, dist_sq: np.ndarray | None = None
) -> list[list[Node]]:
    """All cluster levels 0..top, each a list of nodes sorted by center."""
    x = points.x
    n = points.n
    if dist_sq is None:
        dist_sq = pairwise_sq(x)
    top = params.top_level(points.d)

    leaves = []
    for i in range(n):
        leaf = Node(0, center=i)
        leaf.members = np.array([i], dtype=np.int64)
        leaves.append(leaf)
    levels = [leaves]

    iu, ju = np.triu_indices(n, 1)
    weights = dist_sq[iu, ju]
    order = np.argsort(weights, kind="stable")
    iu, ju, weights = iu[order], ju[order], weights[order]

    uf = UnionFind(n)
    ptr = 0
    current = leaves
    for level in range(1, top + 1):
        threshold = 4**level
        while ptr < len(weights) and int(weights[ptr]) <= threshold:
            uf.union(int(iu[ptr]), int(ju[ptr]))
            ptr += 1
        groups: dict[int, list[Node]] = {}
        for node in current:
            groups.setdefault(uf.find(int(node.members[0])), []).append(node)
        new_level = []
        for key in sorted(groups, key=lambda r: min(c.center for c in groups[r])):
            kids = sorted(groups[key], key=lambda c: c.center)
            parent = Node(level, center=kids[0].center)
            parent.children = kids
            for c in kids:
                c.parent = parent
            parent.members = np.sort(np.concatenate([c.members for c in kids]))
            if parent.members.shape[0] > 1:
                parent.diam_sq = int(
                    dist_sq[np.ix_(parent.members, parent.members)].max()
                )
            new_level.append(parent)
        levels.append(new_level)
        current = new_level
    if len(current) != 1:
        raise AssertionError("top level must cover the domain diameter")
    return levels


def compress(root: Node, eps: float) -> None:
    """Replace over-long single-child chains by long edges, in place."""
    stack = [root]
    while stack:
        v = stack.pop()
        if len(v.children) == 1 and (v.parent is None or len(v.parent.children) > 1):
            path = [v]
            while len(path[-1].children) == 1:
                path.append(path[-1].children[0])
            bottom = path[-1]
            k = len(path) - 1
            budget = topout_budget(bottom.diam_sq, bottom.level, eps)
            if k > budget:
                keep = path[k - budget]
                v.children = [keep]
                keep.parent = v
                keep.edge_long = True
            stack.extend(bottom.children)
        else:
            stack.extend(v.children)


def mark_subtree_roots(root: Node) -> None:
    for node in preorder(root):
        node.is_subtree_root = node.parent is None or node.edge_long


def _contains(members: np.ndarray, point: int) -> bool:
    idx = int(np.searchsorted(members, point))
    return idx < members.shape[0] and int(members[idx]) == point


def _leafward_stop(start: Node, point: int) -> Node:
    """Walk from `start` toward the leaf of `point`, stopping at a subtree leaf."""
    node = start
    while not node.subtree_leaf:
        for child in node.children:
            if not child.edge_long and _contains(child.members, point):
                node = child
                break
        else:
            raise AssertionError("point not found under its own cluster")
    return node


def assign_ingresses(root: Node, dist_sq: np.ndarray) -> None:
    """Choose surrogate anchors and put children into replay order."""
    for v in preorder(root):
        if v.subtree_leaf:
            continue
        kids = v.children
        if any(c.edge_long for c in kids):
            raise AssertionError("a node with a long child cannot have siblings for it")
        threshold = 4**v.level
        first = next(c for c in kids if c.center == v.center)

        if len(kids) == 1:
            order = [first]
            tau_parent: dict[int, Node] = {}
        else:
            adj: dict[int, list[Node]] = {id(c): [] for c in kids}
            for a in range(len(kids)):
                for b in range(a + 1, len(kids)):
                    ca, cb = kids[a], kids[b]
                    cross = dist_sq[np.ix_(ca.members, cb.members)].min()
                    if int(cross) <= threshold:
                        adj[id(ca)].append(cb)
                        adj[id(cb)].append(ca)
            order = [first]
            tau_parent = {}
            seen = {id(first)}
            queue = [first]
            while queue:
                cur = queue.pop(0)
                for nb in sorted(adj[id(cur)], key=lambda c: c.center):
                    if id(nb) not in seen:
                        seen.add(id(nb))
                        tau_parent[id(nb)] = cur
                        order.append(nb)
                        queue.append(nb)
            if len(order) != len(kids):
                raise AssertionError("children of a merge node must be linked within 2^level")

        v.children = order
        first.ingress = v
        for child in order[1:]:
            anchor_branch = tau_parent[id(child)]
            block = dist_sq[np.ix_(anchor_branch.members, child.members)]
            row = int(np.argmin(block) // block.shape[1])
            x = int(anchor_branch.members[row])
            anchor = _leafward_stop(anchor_branch, x)
            if not anchor.subtree_leaf:
                raise AssertionError("ingress anchor must be a subtree leaf")
            child.ingress = anchor


def surrogate_step(level: int, k_code: int) -> float:
    """Reconstruction scale 2^level * (5 + k); exact in binary64."""
    return math.ldexp(float(5 + k_code), level)


def compute_surrogates(root: Node, points: PointSet, params: Params, hashes: GridHashes) -> None:
    phi, d, eps = points.phi, points.d, params.eps
    x = points.x.astype(np.float64)

    def snap_root(r: Node) -> None:
        grid = grid_for(math.ldexp(1.0, r.level), phi, d)
        cells, corner = grid.snap(x[r.center])
        r.cells = cells
        r.surrogate = corner
        r.root_hash = int(hashes.hash_cells(r.level, cells[None, :])[0])

    def snap_member(v: Node) -> None:
        k = diam_code(v.diam_sq, v.level)
        v.k_code = k
        gamma0 = 1.0 / (5 + k)
        gamma = gamma0 * eps if v.subtree_leaf else gamma0
        grid = grid_for(gamma, phi, d)
        if grid.halvings < 1:
            raise AssertionError("displacement grid must be finer than the domain")
        if v.ingress is None or v.ingress.surrogate is None:
            raise AssertionError("anchor surrogate must be computed first")
        step = surrogate_step(v.level, k)
        u = (x[v.center] - v.ingress.surrogate) / step
        if float(u @ u) > 1.0 + 1e-9:
            raise AssertionError("scaled displacement escaped the unit ball")
        cells, corner = grid.snap(u)
        v.cells = cells
        v.zeta = cells - (1 << (grid.halvings - 1))
        v.surrogate = v.ingress.surrogate + corner * step

    for r in (n for n in preorder(root) if n.is_subtree_root):
        snap_root(r)
        # preorder over the subtree's own nodes: each node is snapped when
        # visited, so a later sibling's anchor (somewhere in an earlier
        # sibling's block) is always ready
        stack = [c for c in reversed(r.children) if not c.edge_long]
        while stack:
            v = stack.pop()
            snap_member(v)
            stack.extend(reversed([c for c in v.children if not c.edge_long]))

    # replay order sanity: anchors precede their dependents in preorder
    position = {id(n): i for i, n in enumerate(preorder(root))}
    for node in preorder(root):
        if node.ingress is not None and position[id(node.ingress)] >= position[id(node)]:
            raise AssertionError("anchor must precede its dependent in preorder")


@dataclass
class SketchTree:
    """A built or decoded sketch: compressed tree plus hashing context.

    `points` is present only on the encode side; decode reconstructs
    `members` from leaf centers but never sees coordinates.
    """

    root: Node
    params: Params
    n: int
    d: int
    seed: int
    hashes: GridHashes
    points: PointSet | None = None
    dist: "object | None" = None
    jl: "object | None" = None
    _nodes: list[Node] | None = field(default=None, repr=False)

    @property
    def nodes(self) -> list[Node]:
        if self._nodes is None:
            self._nodes = preorder(self.root)
        return self._nodes

    def invalidate(self) -> None:
        self._nodes = None

    @property
    def subtree_roots(self) -> list[Node]:
        return [n for n in self.nodes if n.is_subtree_root]

    def leaf_for_center(self) -> dict[int, Node]:
        return {n.center: n for n in self.nodes if not n.children}

    def ensure_members(self) -> None:
        for node in reversed(self.nodes):
            if node.members is None:
                if not node.children:
                    node.members = np.array([node.center], dtype=np.int64)
                else:
                    node.members = np.sort(
                        np.concatenate([c.members for c in node.children])
                    )


def build_tree(
    points: PointSet, params: Params, seed: int = 0, *, validate: bool = True
) -> SketchTree:
    """Full Alice-side construction (no distance payloads).

    ``validate=False`` skips the user-boundary dimension checks; the
    projection pipeline uses it because the reduced dimension may exceed n.
    """
    if validate:
        params.validate_for(points.n, points.d)
    dist_sq = pairwise_sq(points.x)
    levels = threshold_hierarchy(points, params, dist_sq)
    root = levels[-1][0]
    compress(root, params.eps)
    mark_subtree_roots(root)
    assign_ingresses(root, dist_sq)
    num_levels = params.top_level(points.d) + 1
    width = hash_width(points.d, num_levels, params.q, params.delta)
    hashes = GridHashes(seed, num_levels, points.d, width)
    compute_surrogates(root, points, params, hashes)
    return SketchTree(
        root=root,
        params=params,
        n=points.n,
        d=points.d,
        seed=seed,
        hashes=hashes,
        points=points,
    )
