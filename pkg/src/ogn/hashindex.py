"""Vectorized open-addressing hash table mapping integer keys to row positions.

All feature maps and octree levels address their rows through one of these.
Inserts happen once at construction (tables are immutable afterwards); lookups
are batched so a whole gather of neighbour keys costs a handful of numpy passes.
"""

import numpy as np

_EMPTY = np.int64(-1)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


class HashIndex:
    """Linear-probing table from non-negative int64 keys to ``0..n-1``.

    Position ``i`` is the index of ``keys[i]`` in the array handed to the
    constructor. Load factor stays at or below 1/2.
    """

    def __init__(self, keys):
        keys = np.ascontiguousarray(keys, dtype=np.int64)
        if keys.ndim != 1:
            raise ValueError("keys must be one-dimensional")
        if keys.size and keys.min() < 0:
            raise ValueError("keys must be non-negative")
        n = keys.size
        bits = max(4, int(2 * n).bit_length())
        self._bits = bits
        self._mask = (1 << bits) - 1
        self._slot_keys = np.full(1 << bits, _EMPTY, dtype=np.int64)
        self._slot_rows = np.full(1 << bits, -1, dtype=np.int64)
        self._size = n
        if n:
            if np.unique(keys).size != n:
                raise ValueError("duplicate keys")
            self._insert(keys)

    def __len__(self):
        return self._size

    def _hash(self, keys):
        h = keys.astype(np.uint64) * _GOLDEN
        return (h >> np.uint64(64 - self._bits)).astype(np.int64)

    def _insert(self, keys):
        pos = self._hash(keys)
        todo = np.arange(keys.size)
        while todo.size:
            slots = pos[todo]
            free = self._slot_keys[slots] == _EMPTY
            cand, cand_slots = todo[free], slots[free]
            # several pending keys may hash to the same free slot; lowest index wins
            won_slots, first = np.unique(cand_slots, return_index=True)
            winners = cand[first]
            self._slot_keys[won_slots] = keys[winners]
            self._slot_rows[won_slots] = winners
            placed = np.zeros(keys.size, dtype=bool)
            placed[winners] = True
            todo = todo[~placed[todo]]
            pos[todo] = (pos[todo] + 1) & self._mask

    def lookup(self, queries):
        """Row position of every query key, ``-1`` where absent."""
        queries = np.asarray(queries, dtype=np.int64)
        shape = queries.shape
        q = queries.ravel()
        out = np.full(q.size, -1, dtype=np.int64)
        if self._size == 0 or q.size == 0:
            return out.reshape(shape)
        # negative queries (out-of-grid neighbours) can never be present
        active = np.flatnonzero(q >= 0)
        pos = np.zeros(q.size, dtype=np.int64)
        pos[active] = self._hash(q[active])
        while active.size:
            slots = pos[active]
            found = self._slot_keys[slots]
            hit = found == q[active]
            out[active[hit]] = self._slot_rows[slots[hit]]
            keep = ~hit & (found != _EMPTY)
            active = active[keep]
            pos[active] = (slots[keep] + 1) & self._mask
        return out.reshape(shape)

    def contains(self, queries):
        return self.lookup(queries) >= 0
