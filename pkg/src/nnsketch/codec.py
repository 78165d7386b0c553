"""Bit-exact serialization of sketches, version 1.

The blob is one unaligned bit stream read most-significant bit first:

1. Header: magic "NNSK", version u16, engine u8 (0 exact, 1 quadtree),
   eps and delta as binary64 bit patterns, then q, phi, d, n as varints,
   a flags byte (bit 0: distance section present, bit 1: projection
   preprocessing present) and the 64-bit master seed.
2. Tree section, nodes in preorder with children in stored order.  Each
   record is: child count; for nodes under a long edge boundary nothing
   extra, for interior members the displacement payload (code of the
   diameter ratio, ingress reference, d zig-zag displacement
   coordinates); a center varint at leaves; then one long-edge flag bit
   per child, followed by the level gap when set.  Levels are never
   written: a plain edge always drops exactly one level, so the gaps on
   long edges determine every level from the root's.
3. Hash section (exact engine): one fixed-width value per subtree root,
   in preorder, at the width the receiver recomputes from the header.
4. Optional distance section: its own 64-bit seed, the dimension
   constant as a varint, then per subtree root the quantized projected
   center (zig-zag varints) and the torus payload (fixed-width cells).
5. Optional projection-preprocessing section: seed, original dimension,
   original domain bound, and the integer rescaling factor.

Varints are LEB128 (7 data bits per group, low group first, high bit
continues), written straight into the bit stream without byte
alignment.  Signed values use zig-zag.  Quadtree blobs replace sections
3-4 with nothing and prepend the refinement depth and the shift vector
to their tree section; each plain edge stores its d child-position bits
packed as one group.

Ingress references are encoded as the distance back in the enclosing
subtree's own visit order, so a reference always points at an already
decoded node of the same subtree.  Everything else a query needs
(centers of interior nodes, membership lists, hash width, scale
factors) is recomputed rather than stored.

Decoding validates eagerly: bad magic, a foreign version, an
over-long varint, references or counts that leave the valid range, and
any truncation raise DecodeError rather than returning a partial tree.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from nnsketch.distsketch import DistParams, DistSection, JLPreproc, ScaleSketch
from nnsketch.geometry import Params, PointSet
from nnsketch.hashing import GridHashes, hash_width
from nnsketch.hierarchy import Node, SketchTree
from nnsketch.quadtree import QuadNode, QuadTree

MAGIC = b"NNSK"
VERSION = 1

_ENGINE_EXACT = 0
_ENGINE_QUADTREE = 1
_FLAG_DIST = 1
_FLAG_JL = 2
_MASK64 = (1 << 64) - 1


class DecodeError(ValueError):
    """The byte stream is not a well-formed version-1 sketch blob."""


class BitWriter:
    def __init__(self) -> None:
        self._out = bytearray()
        self._acc = 0
        self._nbits = 0
        self.bit_length = 0

    def write(self, value: int, nbits: int) -> None:
        assert 0 <= value < (1 << nbits)
        self._acc = (self._acc << nbits) | value
        self._nbits += nbits
        self.bit_length += nbits
        while self._nbits >= 8:
            self._nbits -= 8
            self._out.append((self._acc >> self._nbits) & 0xFF)
        self._acc &= (1 << self._nbits) - 1

    def write_varint(self, value: int) -> None:
        assert value >= 0
        while True:
            group = value & 0x7F
            value >>= 7
            self.write((0x80 | group) if value else group, 8)
            if not value:
                return

    def write_signed(self, value: int) -> None:
        self.write_varint(value * 2 if value >= 0 else -value * 2 - 1)

    def write_f64(self, value: float) -> None:
        self.write(int.from_bytes(struct.pack(">d", value), "big"), 64)

    def getvalue(self) -> bytes:
        if self._nbits:
            pad = 8 - self._nbits
            self._out.append((self._acc << pad) & 0xFF)
            self._acc = 0
            self._nbits = 0
        return bytes(self._out)


class BitReader:
    def __init__(self, data: bytes) -> None:
        self._data = data
        self._total = len(data) * 8
        self.pos = 0

    def take(self, nbits: int) -> int:
        if self.pos + nbits > self._total:
            raise DecodeError("truncated stream")
        value = 0
        pos = self.pos
        remaining = nbits
        while remaining:
            byte = self._data[pos >> 3]
            offset = pos & 7
            chunk = min(8 - offset, remaining)
            shift = 8 - offset - chunk
            value = (value << chunk) | ((byte >> shift) & ((1 << chunk) - 1))
            pos += chunk
            remaining -= chunk
        self.pos = pos
        return value

    def varint(self) -> int:
        value = 0
        for k in range(10):
            group = self.take(8)
            value |= (group & 0x7F) << (7 * k)
            if not group & 0x80:
                if value > _MASK64:
                    raise DecodeError("varint overflow")
                return value
        raise DecodeError("varint overflow")

    def signed(self) -> int:
        u = self.varint()
        return (u >> 1) ^ -(u & 1)

    def f64(self) -> float:
        return struct.unpack(">d", self.take(64).to_bytes(8, "big"))[0]

    def expect_end(self) -> None:
        remaining = self._total - self.pos
        if remaining >= 8 or (remaining and self.take(remaining)):
            raise DecodeError("trailing data after blob")


@dataclass(frozen=True)
class SketchBlob:
    """Encoded sketch plus the bit accounting behind the size claims."""

    data: bytes
    engine: str
    bits: dict[str, int]

    @property
    def bits_total(self) -> int:
        return sum(self.bits.values())

    @property
    def bits_tree(self) -> int:
        return self.bits["topology"] + self.bits["centers"] + self.bits["displacements"]

    def breakdown(self) -> str:
        lines = [f"engine: {self.engine}", f"bytes: {len(self.data)}"]
        for key in ("header", "topology", "centers", "displacements", "hashes", "dist", "jl"):
            lines.append(f"bits[{key}]: {self.bits[key]}")
        lines.append(f"bits[total]: {self.bits_total}")
        return "\n".join(lines)


def _new_bits() -> dict[str, int]:
    return {k: 0 for k in ("header", "topology", "centers", "displacements", "hashes", "dist", "jl")}


def _write_header(w: BitWriter, engine: int, sketch) -> None:
    p: Params = sketch.params
    w.write(int.from_bytes(MAGIC, "big"), 32)
    w.write(VERSION, 16)
    w.write(engine, 8)
    w.write_f64(p.eps)
    w.write_f64(p.delta)
    w.write_varint(p.q)
    w.write_varint(p.phi)
    w.write_varint(sketch.d)
    w.write_varint(sketch.n)
    flags = 0
    if getattr(sketch, "dist", None) is not None:
        flags |= _FLAG_DIST
    if sketch.jl is not None:
        flags |= _FLAG_JL
    w.write(flags, 8)
    w.write(sketch.seed & _MASK64, 64)


def _write_jl(w: BitWriter, jl: JLPreproc) -> None:
    w.write(jl.seed & _MASK64, 64)
    w.write_varint(jl.orig_d)
    w.write_varint(jl.orig_phi)
    w.write_varint(jl.scale)


def _encode_exact(tree: SketchTree) -> SketchBlob:
    w = BitWriter()
    bits = _new_bits()

    def count(key: str, mark: int) -> None:
        bits[key] += w.bit_length - mark

    mark = w.bit_length
    _write_header(w, _ENGINE_EXACT, tree)
    count("header", mark)

    subtree_of: dict[int, Node] = {}
    ordinal: dict[int, int] = {}
    counters: dict[int, int] = {}
    for node in tree.nodes:
        if node.parent is None or node.edge_long:
            sub = node
        else:
            sub = subtree_of[id(node.parent)]
        subtree_of[id(node)] = sub
        ordinal[id(node)] = counters.get(id(sub), 0)
        counters[id(sub)] = ordinal[id(node)] + 1

        mark = w.bit_length
        w.write_varint(len(node.children))
        count("topology", mark)
        if not node.is_subtree_root:
            mark = w.bit_length
            w.write_varint(node.k_code)
            count("displacements", mark)
            mark = w.bit_length
            delta = ordinal[id(node)] - ordinal[id(node.ingress)]
            assert delta >= 1 and subtree_of[id(node.ingress)] is sub
            w.write_varint(delta)
            count("topology", mark)
            mark = w.bit_length
            for z in node.zeta.tolist():
                w.write_signed(z)
            count("displacements", mark)
        if not node.children:
            mark = w.bit_length
            w.write_varint(node.center)
            count("centers", mark)
        mark = w.bit_length
        for child in node.children:
            w.write(int(child.edge_long), 1)
            if child.edge_long:
                w.write_varint(node.level - child.level)
        count("topology", mark)

    mark = w.bit_length
    for root in tree.subtree_roots:
        w.write(root.root_hash, tree.hashes.width)
    count("hashes", mark)

    if tree.dist is not None:
        mark = w.bit_length
        sec: DistSection = tree.dist
        w.write(sec.seed & _MASK64, 64)
        w.write_varint(sec.params.c)
        width = ScaleSketch(0, sec.params.eps, sec.params.range_dim, tree.d, 0).cell_width
        for q in sec.qproj:
            for v in q.tolist():
                w.write_signed(v)
        for cells in sec.range_cells:
            for v in cells.tolist():
                w.write(v, width)
        count("dist", mark)

    if tree.jl is not None:
        mark = w.bit_length
        _write_jl(w, tree.jl)
        count("jl", mark)

    return SketchBlob(data=w.getvalue(), engine="exact", bits=bits)


def _encode_quadtree(tree: QuadTree) -> SketchBlob:
    w = BitWriter()
    bits = _new_bits()

    def count(key: str, mark: int) -> None:
        bits[key] += w.bit_length - mark

    mark = w.bit_length
    _write_header(w, _ENGINE_QUADTREE, tree)
    w.write_varint(tree.lam)
    for s in tree.sigma.tolist():
        w.write_signed(s)
    count("header", mark)

    for node in tree.nodes():
        mark = w.bit_length
        w.write_varint(len(node.children))
        count("topology", mark)
        if not node.children:
            mark = w.bit_length
            w.write_varint(node.center)
            count("centers", mark)
        for child in node.children:
            mark = w.bit_length
            w.write(int(child.edge_long), 1)
            if child.edge_long:
                w.write_varint(child.span)
                count("topology", mark)
            else:
                packed = 0
                for b in child.bits.tolist():
                    packed = (packed << 1) | int(b)
                w.write(packed, tree.d)
                count("displacements", mark)

    if tree.jl is not None:
        mark = w.bit_length
        _write_jl(w, tree.jl)
        count("jl", mark)

    return SketchBlob(data=w.getvalue(), engine="quadtree", bits=bits)


def encode(sketch) -> SketchBlob:
    """Serialize a sketch; the result carries the per-section bit counts."""
    if isinstance(sketch, SketchTree):
        return _encode_exact(sketch)
    if isinstance(sketch, QuadTree):
        return _encode_quadtree(sketch)
    raise TypeError(f"cannot encode {type(sketch).__name__}")


def _read_header(r: BitReader):
    if r.take(32) != int.from_bytes(MAGIC, "big"):
        raise DecodeError("bad magic")
    version = r.take(16)
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}")
    engine = r.take(8)
    if engine not in (_ENGINE_EXACT, _ENGINE_QUADTREE):
        raise DecodeError(f"unknown engine tag {engine}")
    eps = r.f64()
    delta = r.f64()
    if not (0.0 < eps < 1.0 and 0.0 < delta < 1.0):
        raise DecodeError("eps/delta outside (0, 1)")
    q = r.varint()
    phi = r.varint()
    d = r.varint()
    n = r.varint()
    if min(q, phi, d, n) < 1:
        raise DecodeError("nonpositive header field")
    flags = r.take(8)
    if flags & ~(_FLAG_DIST | _FLAG_JL):
        raise DecodeError("unknown flag bits")
    seed = r.take(64)
    try:
        params = Params(eps=eps, delta=delta, q=q, phi=phi)
    except ValueError as exc:
        raise DecodeError(f"invalid parameters: {exc}") from exc
    return engine, params, d, n, flags, seed


def _read_jl(r: BitReader, d: int, phi: int) -> JLPreproc:
    seed = r.take(64)
    orig_d = r.varint()
    orig_phi = r.varint()
    scale = r.varint()
    if min(orig_d, orig_phi, scale) < 1:
        raise DecodeError("nonpositive preprocessing field")
    jl = JLPreproc(seed, orig_d, orig_phi, d, scale)
    if jl.new_phi != phi:
        raise DecodeError("preprocessing domain does not match the header")
    return jl


def _decode_exact(r: BitReader, params: Params, d: int, n: int, flags: int, seed: int) -> SketchTree:
    top = params.top_level(d)
    leaves = 0

    sublists: dict[int, list[Node]] = {}

    def read_node(level: int, is_root: bool, sub: Node | None) -> Node:
        nonlocal leaves
        if level < 0:
            raise DecodeError("node level fell below zero")
        node = Node(level)
        node.is_subtree_root = is_root
        members = sublists.setdefault(id(node if is_root else sub), [])
        own_sub = node if is_root else sub
        n_children = r.varint()
        if n_children > n:
            raise DecodeError("child count exceeds n")
        if not is_root:
            node.k_code = r.varint()
            delta = r.varint()
            if not 1 <= delta <= len(members):
                raise DecodeError("ingress reference out of range")
            node.ingress = members[len(members) - delta]
            node.zeta = np.array([r.signed() for _ in range(d)], dtype=np.int64)
        members.append(node)
        if not n_children:
            node.center = r.varint()
            if node.center >= n:
                raise DecodeError("leaf center exceeds n")
            leaves += 1
            node.members = None
        specs = []
        for _ in range(n_children):
            if r.take(1):
                gap = r.varint()
                if gap < 1:
                    raise DecodeError("empty long edge")
                specs.append(gap)
            else:
                specs.append(0)
        for gap in specs:
            child = read_node(
                level - (gap or 1), bool(gap), None if gap else own_sub
            )
            child.edge_long = bool(gap)
            child.parent = node
            node.children.append(child)
        if n_children:
            node.center = min(c.center for c in node.children)
        return node

    root = read_node(top, True, None)
    if leaves != n:
        raise DecodeError(f"expected {n} leaves, found {leaves}")

    num_levels = top + 1
    width = hash_width(d, num_levels, params.q, params.delta)
    hashes = GridHashes(seed, num_levels, d, width)
    tree = SketchTree(root=root, params=params, n=n, d=d, seed=seed, hashes=hashes)
    for sub in tree.subtree_roots:
        sub.root_hash = r.take(width)

    if flags & _FLAG_DIST:
        dist_seed = r.take(64)
        c = r.varint()
        if c < 1:
            raise DecodeError("nonpositive dimension constant")
        dp = DistParams(params.eps, params.delta, params.q, num_levels, c)
        roots = tree.subtree_roots
        qproj = [
            np.array([r.signed() for _ in range(dp.proj_dim)], dtype=np.int64)
            for _ in roots
        ]
        width = ScaleSketch(0, dp.eps, dp.range_dim, d, 0).cell_width
        cells = ScaleSketch(0, dp.eps, dp.range_dim, d, 0).cells
        range_cells = []
        for _ in roots:
            vals = np.array([r.take(width) for _ in range(dp.range_dim)], dtype=np.int64)
            if vals.max(initial=0) >= cells:
                raise DecodeError("torus cell outside range")
            range_cells.append(vals)
        tree.dist = DistSection(dist_seed, dp, qproj, range_cells)

    if flags & _FLAG_JL:
        tree.jl = _read_jl(r, d, params.phi)
    return tree


def _decode_quadtree(r: BitReader, params: Params, d: int, n: int, flags: int, seed: int) -> QuadTree:
    if flags & _FLAG_DIST:
        raise DecodeError("quadtree blobs cannot carry distance payloads")
    lam = r.varint()
    if lam < 1:
        raise DecodeError("nonpositive refinement depth")
    sigma = np.array([r.signed() for _ in range(d)], dtype=np.int64)
    if np.abs(sigma).max(initial=0) > params.phi:
        raise DecodeError("shift outside domain")
    top = int(4 * params.phi).bit_length()
    leaves = 0

    def read_node(level: int) -> QuadNode:
        nonlocal leaves
        if level < -lam:
            raise DecodeError("cell level fell below the refinement floor")
        node = QuadNode(level)
        n_children = r.varint()
        if n_children > n:
            raise DecodeError("child count exceeds n")
        if not n_children:
            if level != -lam:
                raise DecodeError("leaf above the refinement floor")
            node.center = r.varint()
            if node.center >= n:
                raise DecodeError("leaf center exceeds n")
            leaves += 1
        specs = []
        for _ in range(n_children):
            if r.take(1):
                span = r.varint()
                if span < 1:
                    raise DecodeError("empty long edge")
                specs.append((True, span, None))
            else:
                packed = r.take(d)
                bits = np.array(
                    [(packed >> (d - 1 - i)) & 1 for i in range(d)], dtype=np.uint8
                )
                specs.append((False, 1, bits))
        for long, span, child_bits in specs:
            child = read_node(level - span)
            child.edge_long = long
            child.span = span
            child.bits = child_bits
            node.children.append(child)
        if n_children:
            node.center = min(c.center for c in node.children)
        return node

    root = read_node(top)
    if leaves != n:
        raise DecodeError(f"expected {n} leaves, found {leaves}")
    tree = QuadTree(
        root=root, params=params, lam=lam, sigma=sigma, n=n, d=d, seed=seed
    )
    if flags & _FLAG_JL:
        tree.jl = _read_jl(r, d, params.phi)
    return tree


def decode(data: bytes):
    """Rebuild a sketch from blob bytes; raises DecodeError on malformed input."""
    r = BitReader(bytes(data))
    engine, params, d, n, flags, seed = _read_header(r)
    if engine == _ENGINE_EXACT:
        sketch = _decode_exact(r, params, d, n, flags, seed)
    else:
        sketch = _decode_quadtree(r, params, d, n, flags, seed)
    r.expect_end()
    return sketch


def save_sketch(path, sketch) -> SketchBlob:
    blob = encode(sketch)
    Path(path).write_bytes(blob.data)
    return blob


def load_sketch(path):
    return decode(Path(path).read_bytes())
