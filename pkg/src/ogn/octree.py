"""Hash-table octrees addressed by Morton (Z-order) codes.

Level 0 is the coarse base grid of resolution ``base = (d1, d2, d3)``; every
base cell is an independent subdivision root and level ``l`` has resolution
``base * 2**l``. A cell is addressed by its integer coordinates inside its
level's grid; the code interleaves those coordinates with x in the lowest slot
(bit ``i`` of x -> code bit ``3i``, y -> ``3i+1``, z -> ``3i+2``), so the
ancestor of a code ``k`` levels up is simply ``code >> 3k``.
"""

import enum
import struct
from typing import NamedTuple

import numpy as np

from .hashindex import HashIndex

COORD_BITS = 21  # 3 * 21 = 63 code bits, fits a signed 64-bit integer
MAGIC = b"OGN1"


class CellState(enum.IntEnum):
    EMPTY = 0
    FILLED = 1
    MIXED = 2


class OctreeKey(NamedTuple):
    level: int
    code: int


class KeyRangeError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class StructureError(ValueError):
    pass


class FormatError(ValueError):
    pass


_SPREAD_MASKS = (
    (32, 0x1F00000000FFFF),
    (16, 0x1F0000FF0000FF),
    (8, 0x100F00F00F00F00F),
    (4, 0x10C30C30C30C30C3),
    (2, 0x1249249249249249),
)


def _spread3(v):
    v = np.asarray(v, dtype=np.uint64) & np.uint64(0x1FFFFF)
    for shift, mask in _SPREAD_MASKS:
        v = (v | (v << np.uint64(shift))) & np.uint64(mask)
    return v


_COMPACT_MASKS = (
    (2, 0x10C30C30C30C30C3),
    (4, 0x100F00F00F00F00F),
    (8, 0x1F0000FF0000FF),
    (16, 0x1F00000000FFFF),
    (32, 0x1FFFFF),
)


def _compact3(v):
    v = np.asarray(v, dtype=np.uint64) & np.uint64(0x1249249249249249)
    for shift, mask in _COMPACT_MASKS:
        v = (v ^ (v >> np.uint64(shift))) & np.uint64(mask)
    return v.astype(np.int64)


def encode_codes(x, y, z):
    """Vectorized Morton encoding of coordinate arrays (no range checks)."""
    code = _spread3(x) | (_spread3(y) << np.uint64(1)) | (_spread3(z) << np.uint64(2))
    return code.astype(np.int64)


def decode_codes(codes):
    codes = np.asarray(codes, dtype=np.int64).astype(np.uint64)
    return (
        _compact3(codes),
        _compact3(codes >> np.uint64(1)),
        _compact3(codes >> np.uint64(2)),
    )


def level_resolution(base, level):
    return tuple(int(d) << level for d in base)


def morton_encode(x, y, z, level, base=(1, 1, 1)):
    res = level_resolution(base, level)
    for c, extent in zip((x, y, z), res):
        if not 0 <= c < extent:
            raise KeyRangeError(f"coordinate {c} outside [0, {extent}) at level {level}")
    if max(res) > 1 << COORD_BITS:
        raise KeyRangeError(f"level {level} exceeds {COORD_BITS}-bit coordinates")
    return OctreeKey(level, int(encode_codes(x, y, z)))


def morton_decode(key):
    x, y, z = decode_codes(np.int64(key.code))
    return int(x), int(y), int(z), key.level


def _grid_codes(res):
    """Codes of every cell of a ``res`` grid, in (x, y, z) C-order."""
    x, y, z = np.meshgrid(*(np.arange(r) for r in res), indexing="ij")
    return encode_codes(x.ravel(), y.ravel(), z.ravel())


class Octree:
    """Leaf set of a binary occupancy octree.

    Leaves are stored per level as sorted code arrays with a hash index for
    constant-time lookup. Instances are immutable.
    """

    def __init__(self, base_resolution, max_level, levels):
        self.base_resolution = tuple(int(d) for d in base_resolution)
        self.max_level = int(max_level)
        if len(levels) != self.max_level + 1:
            raise StructureError("need one (codes, values) pair per level")
        self._codes = []
        self._values = []
        for codes, values in levels:
            codes = np.asarray(codes, dtype=np.int64)
            values = np.asarray(values, dtype=np.int8)
            order = np.argsort(codes, kind="stable")
            codes, values = codes[order], values[order]
            if values.size and (values.min() < 0 or values.max() > 1):
                raise StructureError("leaf values must be Empty or Filled")
            self._codes.append(codes)
            self._values.append(values)
        self._index = [None] * len(self._codes)

    @classmethod
    def from_cells(cls, base_resolution, max_level, cells):
        per_level = [([], []) for _ in range(max_level + 1)]
        for key, value in cells.items():
            if not 0 <= key.level <= max_level:
                raise StructureError(f"cell level {key.level} outside 0..{max_level}")
            if int(value) == CellState.MIXED:
                raise StructureError("Mixed cannot be stored as a leaf")
            per_level[key.level][0].append(key.code)
            per_level[key.level][1].append(int(value))
        return cls(base_resolution, max_level, per_level)

    @property
    def resolution(self):
        return level_resolution(self.base_resolution, self.max_level)

    @property
    def min_level(self):
        for level, codes in enumerate(self._codes):
            if codes.size:
                return level
        return 0

    @property
    def cells(self):
        """Leaves as a ``{OctreeKey: CellState}`` dict, sorted by (level, code)."""
        out = {}
        for level in range(self.max_level + 1):
            for code, value in zip(self._codes[level].tolist(), self._values[level].tolist()):
                out[OctreeKey(level, code)] = CellState(value)
        return out

    def level_codes(self, level):
        return self._codes[level]

    def level_values(self, level):
        return self._values[level]

    def _level_index(self, level):
        if self._index[level] is None:
            self._index[level] = HashIndex(self._codes[level])
        return self._index[level]

    def __len__(self):
        return sum(c.size for c in self._codes)

    def __iter__(self):
        return iter(self.cells.items())

    def __contains__(self, key):
        if not 0 <= key.level <= self.max_level:
            return False
        return bool(self._level_index(key.level).contains(np.array([key.code]))[0])

    def __getitem__(self, key):
        if key not in self:
            raise KeyError(key)
        pos = self._level_index(key.level).lookup(np.array([key.code]))[0]
        return CellState(int(self._values[key.level][pos]))

    def __eq__(self, other):
        if not isinstance(other, Octree):
            return NotImplemented
        return (
            self.base_resolution == other.base_resolution
            and self.max_level == other.max_level
            and all(np.array_equal(a, b) for a, b in zip(self._codes, other._codes))
            and all(np.array_equal(a, b) for a, b in zip(self._values, other._values))
        )

    def __repr__(self):
        return (
            f"Octree(base={self.base_resolution}, max_level={self.max_level}, "
            f"leaves={len(self)})"
        )

    def query_codes(self, level, codes):
        """Vectorized state query; see :func:`query`."""
        codes = np.asarray(codes, dtype=np.int64)
        states = np.full(codes.shape, CellState.MIXED, dtype=np.int8)
        unresolved = np.ones(codes.shape, dtype=bool)
        top = min(level, self.max_level)
        for k in range(top, -1, -1):
            if not self._codes[k].size:
                continue
            idx = np.flatnonzero(unresolved)
            if not idx.size:
                break
            anc = codes[idx] >> np.int64(3 * (level - k))
            pos = self._level_index(k).lookup(anc)
            hit = pos >= 0
            states[idx[hit]] = self._values[k][pos[hit]]
            unresolved[idx[hit]] = False
        return states


def query(x, y, z, level, octree):
    """State of cell ``(x, y, z)`` at ``level``.

    The value of the cell or of its nearest stored ancestor; ``MIXED`` when the
    region is subdivided below ``level`` (its value is not a single number).
    """
    code = encode_codes(x, y, z)
    return CellState(int(octree.query_codes(level, np.array([code]))[0]))


def gt_labels(octree_gt, keys):
    """Element-wise ground-truth states for a list of keys."""
    out = np.empty(len(keys), dtype=np.int8)
    by_level = {}
    for i, key in enumerate(keys):
        by_level.setdefault(key.level, []).append(i)
    for level, idx in by_level.items():
        codes = np.array([keys[i].code for i in idx], dtype=np.int64)
        out[idx] = octree_gt.query_codes(level, codes)
    return [CellState(int(v)) for v in out]


def _subdivision_depth(shape, base):
    ratios = []
    for s, b in zip(shape, base):
        if b <= 0 or s % b:
            raise ShapeError(f"grid shape {shape} is not a multiple of base {base}")
        ratios.append(s // b)
    r = ratios[0]
    if any(q != r for q in ratios) or r & (r - 1):
        raise ShapeError(f"grid/base ratio {ratios} is not one power of two on all axes")
    return r.bit_length() - 1


def from_voxel_grid(grid, base_resolution):
    """Minimal octree of a binary grid indexed ``grid[x, y, z]``."""
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ShapeError("voxel grid must be three-dimensional")
    base = tuple(int(b) for b in base_resolution)
    depth = _subdivision_depth(grid.shape, base)

    vals = [None] * (depth + 1)
    uniform = [None] * (depth + 1)
    vals[depth] = (grid != 0).astype(np.int8)
    uniform[depth] = np.ones(grid.shape, dtype=bool)
    for level in range(depth - 1, -1, -1):
        fine_v, fine_u = vals[level + 1], uniform[level + 1]
        sx, sy, sz = (s // 2 for s in fine_v.shape)
        v8 = fine_v.reshape(sx, 2, sy, 2, sz, 2)
        u8 = fine_u.reshape(sx, 2, sy, 2, sz, 2)
        lo = v8.min(axis=(1, 3, 5))
        hi = v8.max(axis=(1, 3, 5))
        uniform[level] = u8.all(axis=(1, 3, 5)) & (lo == hi)
        vals[level] = lo

    levels = []
    for level in range(depth + 1):
        leaf = uniform[level].copy()
        if level > 0:
            parent_uniform = uniform[level - 1]
            leaf &= ~parent_uniform.repeat(2, 0).repeat(2, 1).repeat(2, 2)
        x, y, z = np.nonzero(leaf)
        levels.append((encode_codes(x, y, z), vals[level][x, y, z]))
    return Octree(base, depth, levels)


def to_voxel_grid(octree):
    """Paint every leaf over its extent at the finest resolution."""
    base = octree.base_resolution
    values = np.zeros(base, dtype=np.int8)
    cover = np.zeros(base, dtype=np.int16)
    for level in range(octree.max_level + 1):
        if level > 0:
            values = values.repeat(2, 0).repeat(2, 1).repeat(2, 2)
            cover = cover.repeat(2, 0).repeat(2, 1).repeat(2, 2)
        codes = octree.level_codes(level)
        if not codes.size:
            continue
        x, y, z = decode_codes(codes)
        res = level_resolution(base, level)
        if (x >= res[0]).any() or (y >= res[1]).any() or (z >= res[2]).any():
            raise StructureError(f"leaf outside the level-{level} grid")
        values[x, y, z] = octree.level_values(level)
        np.add.at(cover, (x, y, z), 1)
    if cover.min() != 1 or cover.max() != 1:
        raise StructureError("leaves do not tile the volume exactly once")
    return values.astype(bool)


def cells_per_level(octree):
    return [
        (level, int(octree.level_codes(level).size))
        for level in range(octree.max_level + 1)
        if octree.level_codes(level).size
    ]


_LEAF_DTYPE = np.dtype([("level", "u1"), ("code", "<u8"), ("value", "u1")])


def serialize(octree):
    """Little-endian byte stream: header then leaves sorted by (level, code)."""
    d1, d2, d3 = octree.base_resolution
    header = MAGIC + struct.pack("<IIIBQ", d1, d2, d3, octree.max_level, len(octree))
    leaves = np.empty(len(octree), dtype=_LEAF_DTYPE)
    start = 0
    for level in range(octree.max_level + 1):
        codes = octree.level_codes(level)
        end = start + codes.size
        leaves["level"][start:end] = level
        leaves["code"][start:end] = codes
        leaves["value"][start:end] = octree.level_values(level)
        start = end
    return header + leaves.tobytes()


def deserialize(data):
    data = bytes(data)
    head = struct.calcsize("<IIIBQ")
    if len(data) < 4 + head or data[:4] != MAGIC:
        raise FormatError("not an OGN1 octree stream")
    d1, d2, d3, max_level, count = struct.unpack_from("<IIIBQ", data, 4)
    body = data[4 + head:]
    if len(body) != count * _LEAF_DTYPE.itemsize:
        raise FormatError(f"expected {count} leaf records, got {len(body)} bytes")
    leaves = np.frombuffer(body, dtype=_LEAF_DTYPE)
    if leaves.size and leaves["level"].max() > max_level:
        raise FormatError("leaf level exceeds max_level")
    levels = []
    for level in range(max_level + 1):
        sel = leaves["level"] == level
        levels.append((leaves["code"][sel].astype(np.int64), leaves["value"][sel]))
    try:
        return Octree((d1, d2, d3), max_level, levels)
    except StructureError as exc:
        raise FormatError(str(exc)) from exc
