"""Forest of octrees: block ids, 2:1-balanced construction, neighbors, file IO.

The domain starts as a uniform grid of root blocks; each root is an octree
whose leaves are the active blocks.  A block id packs a marker bit, the
root index, and the octant path into one 64-bit integer, so every id is a
self-describing address.  Neighbor tables are rebuilt from ids and never
stored.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

MAX_LEVEL = 19  # 64-bit id capacity guard

# 26 nonzero offsets, faces first, then edges, then corners; fixed order so
# construction is deterministic.
NEIGHBOR_OFFSETS = sorted(
    (
        (dx, dy, dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
        if (dx, dy, dz) != (0, 0, 0)
    ),
    key=lambda d: (sum(map(abs, d)), d),
)

FACE = 1
EDGE = 2
CORNER = 3


class BlockId(int):
    """64-bit block address: marker bit, root index, 3 bits per level.

    The octant index within each 3-bit group is z*4 + y*2 + x.
    """

    __slots__ = ()

    @staticmethod
    def root_width(num_roots: int) -> int:
        return max(0, (num_roots - 1).bit_length())

    @classmethod
    def encode(cls, root_index: int, path, root_width: int) -> "BlockId":
        if len(path) > MAX_LEVEL:
            raise ValueError(f"path deeper than {MAX_LEVEL} levels")
        bits = (1 << root_width) | root_index
        for octant in path:
            bits = (bits << 3) | octant
        if bits.bit_length() > 64:
            raise ValueError("block id exceeds 64 bits")
        return cls(bits)

    def decode(self, root_width: int):
        level = self.level(root_width)
        path = [(self >> (3 * (level - 1 - i))) & 7 for i in range(level)]
        return self.root_index(root_width), tuple(path)

    def level(self, root_width: int) -> int:
        rem = self.bit_length() - 1 - root_width
        if rem < 0 or rem % 3:
            raise ValueError(f"malformed block id {int(self)}")
        return rem // 3

    def root_index(self, root_width: int) -> int:
        level = self.level(root_width)
        return (self >> (3 * level)) & ((1 << root_width) - 1)

    def child(self, octant: int) -> "BlockId":
        if self.bit_length() + 3 > 64:
            raise ValueError("block id exceeds 64 bits")
        return BlockId((self << 3) | octant)

    def parent(self, root_width: int) -> "BlockId":
        if self.level(root_width) == 0:
            raise ValueError("root block has no parent")
        return BlockId(self >> 3)

    def coords(self, root_width: int, root_dims) -> tuple[int, int, int]:
        """Integer block coordinates at this block's level."""
        root_index, path = self.decode(root_width)
        rx, ry, rz = root_dims
        x = root_index % rx
        y = (root_index // rx) % ry
        z = root_index // (rx * ry)
        for octant in path:
            x = 2 * x + (octant & 1)
            y = 2 * y + ((octant >> 1) & 1)
            z = 2 * z + ((octant >> 2) & 1)
        return x, y, z


def child_id(bid: BlockId, octant: int) -> BlockId:
    return BlockId(bid).child(octant)


def parent_of(bid: BlockId, root_width: int = 0) -> BlockId:
    return BlockId(bid).parent(root_width)


def level_of(bid: BlockId, root_width: int) -> int:
    return BlockId(bid).level(root_width)


@dataclass(frozen=True)
class NeighborRecord:
    """One geometric contact between a block and a neighbor leaf.

    ``d`` points from the block toward the neighbor, per axis in {-1,0,1};
    its nonzero axes are exactly the axes where the two closed boxes meet
    in a point, so len(nonzero(d)) is the connection class.  Periodic
    contacts of the same pair through different wrap images are separate
    records.
    """

    id: int
    rank: int
    level_diff: int  # neighbor level minus block level
    cls: int  # FACE, EDGE or CORNER
    d: tuple[int, int, int]
    shift: tuple[int, int, int]  # wrap image offset, block-level cells


@dataclass
class Block:
    id: BlockId
    level: int
    coords: tuple[int, int, int]
    aabb: tuple[float, float, float, float, float, float]
    rank: int = 0
    workload: float = 1.0
    memory: float = 1.0
    neighbors: tuple[NeighborRecord, ...] = ()
    is_stub: bool = False


@dataclass
class BlockForest:
    domain: tuple[float, float, float, float, float, float]
    root_dims: tuple[int, int, int]
    cells_per_block: tuple[int, int, int]
    periodicity: tuple[bool, bool, bool]
    rank_count: int
    blocks: dict[int, Block] = field(default_factory=dict)

    @property
    def root_width(self) -> int:
        rx, ry, rz = self.root_dims
        return BlockId.root_width(rx * ry * rz)

    def sorted_ids(self) -> list[int]:
        return sorted(self.blocks)

    def levels_in_use(self) -> list[int]:
        return sorted({b.level for b in self.blocks.values() if not b.is_stub})

    def block_aabb(self, bid: BlockId):
        level = BlockId(bid).level(self.root_width)
        cx, cy, cz = BlockId(bid).coords(self.root_width, self.root_dims)
        x0, y0, z0, x1, y1, z1 = self.domain
        rx, ry, rz = self.root_dims
        sx = (x1 - x0) / (rx << level)
        sy = (y1 - y0) / (ry << level)
        sz = (z1 - z0) / (rz << level)
        return (
            x0 + cx * sx, y0 + cy * sy, z0 + cz * sz,
            x0 + (cx + 1) * sx, y0 + (cy + 1) * sy, z0 + (cz + 1) * sz,
        )

    def make_block(self, bid: BlockId) -> Block:
        level = BlockId(bid).level(self.root_width)
        return Block(
            id=BlockId(bid),
            level=level,
            coords=BlockId(bid).coords(self.root_width, self.root_dims),
            aabb=self.block_aabb(bid),
        )

    def level_resolution(self, level: int) -> tuple[int, int, int]:
        rx, ry, rz = self.root_dims
        return rx << level, ry << level, rz << level

    def restrict_to_rank(self, rank: int) -> "BlockForest":
        """Process-local view: full local blocks plus (id, rank) stubs."""
        local = {
            bid: blk for bid, blk in self.blocks.items() if blk.rank == rank
        }
        stubs: dict[int, Block] = {}
        for blk in local.values():
            for rec in blk.neighbors:
                if rec.id not in local and rec.id not in stubs:
                    nb = self.blocks[rec.id]
                    stubs[rec.id] = replace(
                        nb, neighbors=(), is_stub=True
                    )
        view = BlockForest(
            domain=self.domain,
            root_dims=self.root_dims,
            cells_per_block=self.cells_per_block,
            periodicity=self.periodicity,
            rank_count=self.rank_count,
            blocks={**local, **stubs},
        )
        return view


def _leaf_map(forest: BlockForest) -> dict[tuple[int, int, int, int], int]:
    rw = forest.root_width
    out = {}
    for bid in forest.blocks:
        b = BlockId(bid)
        lvl = b.level(rw)
        x, y, z = b.coords(rw, forest.root_dims)
        out[(lvl, x, y, z)] = bid
    return out


def _wrap(c, res, periodic):
    """Wrap coordinate list; returns (wrapped, shift) or None if outside."""
    wrapped = []
    shift = []
    for v, n, p in zip(c, res, periodic):
        if 0 <= v < n:
            wrapped.append(v)
            shift.append(0)
        elif p:
            w = v % n
            wrapped.append(w)
            shift.append(v - w)
        else:
            return None
    return tuple(wrapped), tuple(shift)


def _covering_leaves(leaf_map, level, coord, max_descent=1):
    """Leaves covering the same-level cell ``coord``: one at level or above,
    or the existing children one level below on any side."""
    x, y, z = coord
    lvl = level
    cx, cy, cz = x, y, z
    while lvl >= 0:
        hit = leaf_map.get((lvl, cx, cy, cz))
        if hit is not None:
            return [(lvl, (cx, cy, cz), hit)]
        cx, cy, cz = cx >> 1, cy >> 1, cz >> 1
        lvl -= 1
    if max_descent:
        out = []
        for oz in (0, 1):
            for oy in (0, 1):
                for ox in (0, 1):
                    cc = (2 * x + ox, 2 * y + oy, 2 * z + oz)
                    hit = leaf_map.get((level + 1,) + cc)
                    if hit is not None:
                        out.append((level + 1, cc, hit))
        return out
    return []


def enforce_two_one_balance(forest: BlockForest) -> BlockForest:
    """Split blocks until adjacent leaves differ by at most one level.

    Strict balance: face, edge and corner contacts all count.  Never
    merges; idempotent on balanced input.
    """
    rw = forest.root_width
    leaf_map = _leaf_map(forest)
    # queue of leaves that may force a split of something coarser
    queue = list(leaf_map.keys())
    while queue:
        key = queue.pop()
        if key not in leaf_map:
            continue  # already split away
        lvl, x, y, z = key
        if lvl < 2:
            continue  # nothing can be two levels coarser
        res = forest.level_resolution(lvl)
        for d in NEIGHBOR_OFFSETS:
            w = _wrap((x + d[0], y + d[1], z + d[2]), res, forest.periodicity)
            if w is None:
                continue
            (cx, cy, cz), _ = w
            # walk up looking for a too-coarse covering leaf
            clvl, cc = lvl - 2, (cx >> 2, cy >> 2, cz >> 2)
            while clvl >= 0:
                hit = leaf_map.get((clvl,) + cc)
                if hit is not None:
                    _split_leaf(forest, leaf_map, hit, clvl, cc, queue, rw)
                    break
                cc = (cc[0] >> 1, cc[1] >> 1, cc[2] >> 1)
                clvl -= 1
    return forest


def _split_leaf(forest, leaf_map, bid, lvl, coords, queue, rw):
    if lvl >= MAX_LEVEL:
        raise ValueError("2:1 balance would exceed the maximum level")
    del forest.blocks[bid]
    del leaf_map[(lvl,) + coords]
    x, y, z = coords
    for octant in range(8):
        cid = BlockId(bid).child(octant)
        forest.blocks[cid] = forest.make_block(cid)
        ckey = (
            lvl + 1,
            2 * x + (octant & 1),
            2 * y + ((octant >> 1) & 1),
            2 * z + ((octant >> 2) & 1),
        )
        leaf_map[ckey] = cid
        queue.append(ckey)


def neighbor_table(forest: BlockForest) -> None:
    """Attach neighbor records to every block, in place.

    One record per geometric contact; the connection class comes from the
    dimensionality of the closed-box intersection, computed exactly in
    integer coordinates at the finer of the two levels.
    """
    rw = forest.root_width
    leaf_map = _leaf_map(forest)
    for bid in forest.sorted_ids():
        blk = forest.blocks[bid]
        lvl = blk.level
        x, y, z = blk.coords
        res = forest.level_resolution(lvl)
        found: dict[tuple[int, tuple[int, int, int]], NeighborRecord] = {}
        for d in NEIGHBOR_OFFSETS:
            w = _wrap((x + d[0], y + d[1], z + d[2]), res, forest.periodicity)
            if w is None:
                continue
            cc, shift = w
            for nlvl, ncoord, nid in _covering_leaves(leaf_map, lvl, cc):
                if nlvl > lvl and not _touches_side(ncoord, (x, y, z), d):
                    continue
                rec = _contact_record(
                    forest, blk, nid, nlvl, ncoord, shift
                )
                if rec is not None:
                    found.setdefault((nid, rec.shift), rec)
        blk.neighbors = tuple(
            found[k] for k in sorted(found, key=lambda k: (k[0], k[1]))
        )
        for rec in blk.neighbors:
            if abs(rec.level_diff) > 1:
                raise ValueError("neighbor table on an unbalanced forest")


def _touches_side(child_coord, block_coord, d):
    # child at level+1 must lie on the side of its parent facing the block
    for k in range(3):
        if d[k] == 1 and (child_coord[k] & 1) != 0:
            return False
        if d[k] == -1 and (child_coord[k] & 1) != 1:
            return False
    return True


def _contact_record(forest, blk, nid, nlvl, ncoord_wrapped, shift):
    """Build the record for one contact, or None for disjoint boxes."""
    lvl = blk.level
    s = max(lvl, nlvl)
    bx = [c << (s - lvl) for c in blk.coords]
    bw = 1 << (s - lvl)
    # unwrap the neighbor to the periodic image actually touching the block;
    # shift is in block-level cells, rescale it to the neighbor's level
    nx = []
    for k in range(3):
        if nlvl >= lvl:
            sh = shift[k] << (nlvl - lvl)
        else:
            sh = shift[k] >> (lvl - nlvl)
        nx.append((ncoord_wrapped[k] + sh) << (s - nlvl))
    nw = 1 << (s - nlvl)
    d = [0, 0, 0]
    point_axes = 0
    for k in range(3):
        lo = max(bx[k], nx[k])
        hi = min(bx[k] + bw, nx[k] + nw)
        if hi < lo:
            return None
        if hi == lo:
            point_axes += 1
            d[k] = 1 if nx[k] >= bx[k] + bw else -1
    if point_axes == 0:
        return None  # overlapping boxes never happen between leaves
    nb = forest.blocks[nid]
    return NeighborRecord(
        id=int(nid),
        rank=nb.rank,
        level_diff=nlvl - lvl,
        cls=point_axes,
        d=tuple(d),
        shift=tuple(shift),
    )


def build_setup_forest(
    domain,
    root_dims,
    cells_per_block=(10, 10, 10),
    periodicity=(False, False, False),
    refine=None,
    exclude=None,
    max_level=MAX_LEVEL,
    workload=None,
    memory=None,
    rank_count=1,
) -> BlockForest:
    """Two-stage initialization, phase one.

    Order is fixed: iterative refinement until no block is marked or
    ``max_level`` is hit, then exclusion, then 2:1 balancing, then the
    workload and memory callbacks.  Rank assignment is a separate step
    (see balance module).
    """
    rx, ry, rz = root_dims
    forest = BlockForest(
        domain=tuple(float(v) for v in domain),
        root_dims=(rx, ry, rz),
        cells_per_block=tuple(cells_per_block),
        periodicity=tuple(bool(p) for p in periodicity),
        rank_count=rank_count,
    )
    rw = forest.root_width
    for root_index in range(rx * ry * rz):
        bid = BlockId.encode(root_index, (), rw)
        forest.blocks[bid] = forest.make_block(bid)

    if refine is not None:
        pending = forest.sorted_ids()
        while pending:
            next_pending = []
            for bid in pending:
                blk = forest.blocks[bid]
                if blk.level >= max_level or not refine(blk):
                    continue
                del forest.blocks[bid]
                for octant in range(8):
                    cid = BlockId(bid).child(octant)
                    forest.blocks[cid] = forest.make_block(cid)
                    next_pending.append(cid)
            pending = next_pending

    if exclude is not None:
        for bid in forest.sorted_ids():
            if exclude(forest.blocks[bid]):
                del forest.blocks[bid]
        if not forest.blocks:
            raise ValueError("exclusion removed every block")

    enforce_two_one_balance(forest)

    for bid in forest.sorted_ids():
        blk = forest.blocks[bid]
        if workload is not None:
            blk.workload = float(workload(blk))
        if memory is not None:
            blk.memory = float(memory(blk))

    neighbor_table(forest)
    return forest


_HEADER = struct.Struct("<4sI6d3I3I3BIQ")
_RECORD = struct.Struct("<QIdd")


def serialize_forest(forest: BlockForest) -> bytes:
    ids = forest.sorted_ids()
    head = _HEADER.pack(
        b"OFBF",
        1,
        *forest.domain,
        *forest.root_dims,
        *forest.cells_per_block,
        *(1 if p else 0 for p in forest.periodicity),
        forest.rank_count,
        len(ids),
    )
    body = b"".join(
        _RECORD.pack(
            int(bid),
            forest.blocks[bid].rank,
            forest.blocks[bid].workload,
            forest.blocks[bid].memory,
        )
        for bid in ids
    )
    payload = head + body
    return payload + struct.pack("<I", zlib.crc32(payload))


class ForestFormatError(ValueError):
    pass


def deserialize_forest(data: bytes) -> BlockForest:
    if len(data) < _HEADER.size + 4:
        raise ForestFormatError("truncated forest stream")
    payload, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(payload) != crc:
        raise ForestFormatError("forest checksum mismatch")
    fields = _HEADER.unpack_from(payload, 0)
    magic, version = fields[0], fields[1]
    if magic != b"OFBF":
        raise ForestFormatError(f"bad magic {magic!r}")
    if version != 1:
        raise ForestFormatError(f"unsupported forest version {version}")
    domain = fields[2:8]
    root_dims = fields[8:11]
    cells_per_block = fields[11:14]
    periodicity = tuple(bool(v) for v in fields[14:17])
    rank_count = fields[17]
    count = fields[18]
    expected = _HEADER.size + count * _RECORD.size
    if len(payload) != expected:
        raise ForestFormatError(
            f"forest stream length {len(payload)} != expected {expected}"
        )
    forest = BlockForest(
        domain=domain,
        root_dims=root_dims,
        cells_per_block=cells_per_block,
        periodicity=periodicity,
        rank_count=rank_count,
    )
    off = _HEADER.size
    for _ in range(count):
        bits, rank, workload, mem = _RECORD.unpack_from(payload, off)
        off += _RECORD.size
        blk = forest.make_block(BlockId(bits))
        blk.rank = rank
        blk.workload = workload
        blk.memory = mem
        forest.blocks[BlockId(bits)] = blk
    neighbor_table(forest)
    return forest


def save_forest(forest: BlockForest, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_forest(forest))


def load_forest(path) -> BlockForest:
    with open(path, "rb") as fh:
        return deserialize_forest(fh.read())
