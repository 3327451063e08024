"""Octree layers: sparse (up-)convolution, per-level classifier, loss, propagation.

A :class:`SparseFeatureMap` holds one feature vector per stored cell of a single
octree level; absent cells read as zero vectors. Convolutions gather the
neighbourhood of every requested output cell into a column matrix (rows ordered
channel-major, then kernel offset with z slowest and x fastest) and multiply it
by the flattened weights; the backward pass scatters through the same gather
index.
"""

import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .hashindex import HashIndex
from .nn import relu, softmax, softmax_cross_entropy
from .octree import CellState, OctreeKey, decode_codes, encode_codes, level_resolution

PROP_KNOWN = "known"
PROP_PRED = "pred"


class ConfigError(ValueError):
    pass


class ContractError(ValueError):
    pass


class SparseFeatureMap:
    """Features of the stored cells of one level, rows sorted by Morton code."""

    def __init__(self, level, base, codes, features):
        codes = np.asarray(codes, dtype=np.int64)
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != codes.size:
            raise ValueError("features must be (len(codes), channels)")
        if codes.size > 1 and not (np.diff(codes) > 0).all():
            order = np.argsort(codes)
            codes, features = codes[order], features[order]
            if not (np.diff(codes) > 0).all():
                raise ValueError("duplicate codes in feature map")
        self.level = int(level)
        self.base = tuple(int(d) for d in base)
        self.codes = codes
        self.features = features
        self._index = None

    @property
    def channels(self):
        return self.features.shape[1]

    @property
    def resolution(self):
        return level_resolution(self.base, self.level)

    @property
    def index(self):
        if self._index is None:
            self._index = HashIndex(self.codes)
        return self._index

    def __len__(self):
        return self.codes.size

    def __contains__(self, key):
        return key.level == self.level and bool(self.index.contains(np.array([key.code]))[0])

    def __getitem__(self, key):
        pos = self.index.lookup(np.array([key.code]))[0] if key.level == self.level else -1
        if pos < 0:
            raise KeyError(key)
        return self.features[pos]

    def get(self, key):
        """Feature vector of ``key``; zeros when the cell is not stored."""
        try:
            return self[key]
        except KeyError:
            return np.zeros(self.channels)

    def keys(self):
        return [OctreeKey(self.level, c) for c in self.codes.tolist()]

    def items(self):
        return zip(self.keys(), self.features)

    def subset(self, rows):
        return SparseFeatureMap(self.level, self.base, self.codes[rows], self.features[rows])


def dense_to_fmap(x, level, base):
    """All cells of a ``(C, X, Y, Z)`` grid as a feature map."""
    c = x.shape[0]
    gx, gy, gz = np.meshgrid(*(np.arange(n) for n in x.shape[1:]), indexing="ij")
    codes = encode_codes(gx.ravel(), gy.ravel(), gz.ravel())
    order = np.argsort(codes)
    feats = x.reshape(c, -1).T[order]
    return SparseFeatureMap(level, base, codes[order], feats)


def fmap_to_dense(fmap):
    """Scatter into a zero ``(C, X, Y, Z)`` grid."""
    out = np.zeros((fmap.channels,) + fmap.resolution)
    x, y, z = decode_codes(fmap.codes)
    out[:, x, y, z] = fmap.features.T
    return out


class LayerSpec(NamedTuple):
    kind: str  # "conv" or "upconv"
    k: int
    stride: int
    c_in: int
    c_out: int

    @property
    def pad(self):
        return (self.k - 1) // 2 if self.kind == "conv" else 0

    @property
    def level_step(self):
        return 1 if self.kind == "upconv" else 0


def validate_block(layers):
    if not layers:
        raise ConfigError("octree block needs at least one layer")
    ups = [s for s in layers if s.kind == "upconv"]
    if len(ups) != 1 or ups[0].stride != 2:
        raise ConfigError("octree block needs exactly one stride-2 up-convolution")
    for spec in layers:
        if spec.kind == "conv" and (spec.stride != 1 or spec.k % 2 == 0):
            raise ConfigError("octree convolutions must be odd-sized with stride 1")
        if spec.kind == "upconv" and spec.k < spec.stride:
            raise ConfigError("up-convolution kernel smaller than its stride")
        if spec.kind not in ("conv", "upconv"):
            raise ConfigError(f"unknown layer kind {spec.kind!r}")
    for a, b in zip(layers, layers[1:]):
        if a.c_out != b.c_in:
            raise ConfigError(f"channel chain broken: {a.c_out} -> {b.c_in}")


def compute_halo(layers):
    """Offsets ``(lo, hi)`` (per axis, relative to a mixed cell ``m``) of the
    block inputs needed to compute ``m``'s two children at block output.
    """
    validate_block(layers)
    # needed interval is [scale*m + lo, scale*m + hi]
    scale, lo, hi = 2, 0, 1
    for spec in reversed(layers):
        if spec.kind == "conv":
            lo -= spec.pad
            hi += spec.pad
        else:
            if scale % spec.stride:
                raise ConfigError("stride does not divide the output scale")
            scale //= spec.stride
            lo = math.ceil((lo - spec.k + 1) / spec.stride)
            hi = math.floor(hi / spec.stride)
    if scale != 1:
        raise ConfigError("block does not double the resolution")
    return lo, hi


def _offset_table(k):
    """Kernel offsets in row order (z slowest, x fastest) as an ``(k**3, 3)`` array."""
    return np.array([(ox, oy, oz) for oz, oy, ox in itertools.product(range(k), repeat=3)])


def _in_grid(x, y, z, res):
    return (x >= 0) & (y >= 0) & (z >= 0) & (x < res[0]) & (y < res[1]) & (z < res[2])


def input_coords(spec, out_xyz):
    """Input coordinates feeding each output cell for each kernel offset.

    Returns ``(xyz, valid)`` with ``xyz`` of shape ``(3, n_out, k**3)``.
    """
    offs = _offset_table(spec.k)
    out = np.stack(out_xyz)[:, :, None]
    if spec.kind == "conv":
        xyz = out + (offs.T[:, None, :] - spec.pad)
        return xyz, np.ones(xyz.shape[1:], dtype=bool)
    diff = out - offs.T[:, None, :]
    valid = (diff % spec.stride == 0).all(axis=0)
    return diff // spec.stride, valid


def gather_index(fmap, spec, out_codes):
    """Row of ``fmap`` feeding each (output cell, kernel offset), or -1."""
    out_xyz = decode_codes(out_codes)
    xyz, valid = input_coords(spec, out_xyz)
    valid &= _in_grid(xyz[0], xyz[1], xyz[2], fmap.resolution)
    codes = np.where(valid, encode_codes(*(np.where(valid, c, 0) for c in xyz)), -1)
    return fmap.index.lookup(codes)


def weight_matrix(spec, w):
    """Flatten dense-layout weights into the ``(C_out, C_in * k**3)`` matrix."""
    if spec.kind == "conv":
        return w.transpose(0, 1, 4, 3, 2).reshape(spec.c_out, -1)
    return w.transpose(1, 0, 4, 3, 2).reshape(spec.c_out, -1)


def weight_from_matrix(spec, wm):
    k = spec.k
    if spec.kind == "conv":
        return wm.reshape(spec.c_out, spec.c_in, k, k, k).transpose(0, 1, 4, 3, 2)
    return wm.reshape(spec.c_out, spec.c_in, k, k, k).transpose(1, 0, 4, 3, 2)


def _gather_rows(fmap, spec, out_codes):
    """Neighbourhood features as ``(n_out, k**3 * C_in)`` (offset-major) plus the gather index."""
    if fmap.channels != spec.c_in:
        raise ValueError(f"feature map has {fmap.channels} channels, layer expects {spec.c_in}")
    idx = gather_index(fmap, spec, np.asarray(out_codes, dtype=np.int64))
    padded = np.vstack([fmap.features, np.zeros((1, fmap.channels))])
    rows = padded[idx]  # (n_out, k^3, C_in); -1 picks the zero row
    return rows.reshape(idx.shape[0], -1), idx


def sparse_to_matrix(fmap, spec, out_codes):
    """Column matrix ``(C_in * k**3, n_out)`` plus the gather index ``(n_out, k**3)``."""
    rows, idx = _gather_rows(fmap, spec, out_codes)
    cols = rows.reshape(idx.shape[0], idx.shape[1], spec.c_in).transpose(2, 1, 0)
    return cols.reshape(spec.c_in * spec.k ** 3, -1), idx


def matrix_to_sparse(matrix, out_codes, level, base):
    return SparseFeatureMap(level, base, out_codes, np.ascontiguousarray(matrix.T))


def _scatter_rows(drows, idx, n_in):
    """Scatter-add ``(n_out, k**3, C_in)`` gradients back onto input rows.

    For a fixed kernel offset every input row feeds at most one output (stride-1
    conv and stride-s upconv alike), so each offset is a collision-free
    scatter; only the dummy row ``n_in`` collects repeats and is discarded.
    """
    out = np.zeros((n_in + 1, drows.shape[2]))
    for j in range(idx.shape[1]):
        out[idx[:, j]] += drows[:, j]
    return out[:n_in]


def matrix_to_input_grad(dcols, idx, n_in, c_in):
    """Scatter-add column-matrix gradients ``(C_in * k**3, n_out)`` back onto input rows."""
    d = dcols.reshape(c_in, idx.shape[1], -1).transpose(2, 1, 0)
    return _scatter_rows(d, idx, n_in)


def _phase_groups(spec, out_codes):
    """``[(rows or None, kernel offsets), ...]`` partitioning the output cells.

    A stride-s up-convolution output only receives the kernel offsets congruent
    to its own coordinates mod s, so outputs are grouped by that phase and each
    group multiplies only its valid offsets. Convolutions form one group.
    """
    k3 = spec.k ** 3
    if spec.kind == "conv" or spec.stride == 1:
        return [(None, np.arange(k3))]
    st = spec.stride
    x, y, z = decode_codes(out_codes)
    phase = (x % st) + st * (y % st) + st * st * (z % st)
    offs = _offset_table(spec.k) % st
    off_phase = offs[:, 0] + st * offs[:, 1] + st * st * offs[:, 2]
    groups = []
    for ph in range(st ** 3):
        rows = np.flatnonzero(phase == ph)
        if rows.size:
            groups.append((rows, np.flatnonzero(off_phase == ph)))
    return groups


@dataclass
class ConvCache:
    spec: LayerSpec
    groups: list  # (rows, offsets, gathered inputs, gather index) per phase group
    n_in: int
    w3: np.ndarray  # (C_out, k^3, C_in)


def ogn_conv(fmap, w, b, spec, out_codes):
    """Sparse (up-)convolution evaluated at ``out_codes`` (pre-activation)."""
    if fmap.channels != spec.c_in:
        raise ValueError(f"feature map has {fmap.channels} channels, layer expects {spec.c_in}")
    out_codes = np.asarray(out_codes, dtype=np.int64)
    w3 = weight_matrix(spec, w).reshape(spec.c_out, spec.c_in, -1).transpose(0, 2, 1)
    padded = np.vstack([fmap.features, np.zeros((1, fmap.channels))])
    y = np.empty((out_codes.size, spec.c_out))
    groups = []
    for rows, offs in _phase_groups(spec, out_codes):
        codes = out_codes if rows is None else out_codes[rows]
        idx = gather_index(fmap, spec, codes)[:, offs]
        xg = padded[idx].reshape(idx.shape[0], -1)  # -1 picks the zero row
        yg = xg @ w3[:, offs, :].reshape(spec.c_out, -1).T + b
        if rows is None:
            y = yg
        else:
            y[rows] = yg
        groups.append((rows, offs, xg, idx))
    out = SparseFeatureMap(fmap.level + spec.level_step, fmap.base, out_codes, y)
    return out, ConvCache(spec, groups, len(fmap), w3)


def ogn_conv_backward(dy, cache):
    """``dy`` is ``(n_out, C_out)``; returns ``(d_features_in, dw, db)``."""
    spec = cache.spec
    dw3 = np.zeros_like(cache.w3)
    dx = np.zeros((cache.n_in + 1, spec.c_in))
    for rows, offs, xg, idx in cache.groups:
        d = dy if rows is None else dy[rows]
        dw3[:, offs, :] += (d.T @ xg).reshape(spec.c_out, offs.size, spec.c_in)
        dxg = (d @ cache.w3[:, offs, :].reshape(spec.c_out, -1)).reshape(d.shape[0], offs.size, spec.c_in)
        # collision-free per offset: distinct outputs read distinct inputs
        for j in range(offs.size):
            dx[idx[:, j]] += dxg[:, j]
    dwm = dw3.transpose(0, 2, 1).reshape(spec.c_out, -1)
    return dx[: cache.n_in], weight_from_matrix(spec, dwm), dy.sum(axis=0)


def needed_outputs(spec, level_res_in, target_codes):
    """Output cells of the previous layer needed to compute ``target_codes``."""
    xyz, valid = input_coords(spec, decode_codes(target_codes))
    valid &= _in_grid(xyz[0], xyz[1], xyz[2], level_res_in)
    codes = encode_codes(xyz[0][valid], xyz[1][valid], xyz[2][valid])
    return np.unique(codes)


def block_key_sets(layers, level_in, base, target_codes):
    """Output codes of every layer of a block, exact for ``target_codes``."""
    sets = [None] * len(layers)
    sets[-1] = np.unique(np.asarray(target_codes, dtype=np.int64))
    level = level_in + sum(s.level_step for s in layers)
    for i in range(len(layers) - 1, 0, -1):
        level -= layers[i].level_step
        sets[i - 1] = needed_outputs(layers[i], level_resolution(base, level), sets[i])
    return sets


def children_codes(codes):
    codes = np.asarray(codes, dtype=np.int64)
    return np.sort((codes[:, None] << np.int64(3)) + np.arange(8, dtype=np.int64)).ravel()


def block_forward(fmap, layers, params, target_codes):
    """Run a block's OGNConv+ReLU stack; ``params`` is a list of ``(w, b)``."""
    key_sets = block_key_sets(layers, fmap.level, fmap.base, target_codes)
    caches, outputs = [], []
    x = fmap
    for spec, (w, b), codes in zip(layers, params, key_sets):
        x, cache = ogn_conv(x, w, b, spec, codes)
        x.features = relu(x.features)
        caches.append(cache)
        outputs.append(x)
    return x, (caches, outputs)


def block_backward(dout, state):
    """Gradient of a block. Returns ``(d_input_features, [(dw, db), ...])``."""
    caches, outputs = state
    grads = [None] * len(caches)
    d = dout
    for i in range(len(caches) - 1, -1, -1):
        d = d * (outputs[i].features > 0)
        d, dw, db = ogn_conv_backward(d, caches[i])
        grads[i] = (dw, db)
    return d, grads


class CellPrediction(NamedTuple):
    key: OctreeKey
    probs: np.ndarray


class LevelPredictions:
    """Classifier output for the stored cells of one level."""

    def __init__(self, level, codes, logits):
        self.level = level
        self.codes = codes
        self.logits = logits
        self.probs = softmax(logits, axis=1)

    def __len__(self):
        return self.codes.size

    def __iter__(self):
        for code, p in zip(self.codes.tolist(), self.probs):
            yield CellPrediction(OctreeKey(self.level, code), p)

    def states(self):
        return argmax_states(self.probs)


def classify_cells(fmap, w, b):
    """1x1x1 convolution to three logits per cell, softmax-normalised."""
    w = np.asarray(w).reshape(3, -1)
    if w.shape[1] != fmap.channels:
        raise ValueError("classifier channel mismatch")
    if not len(fmap):
        raise ContractError("cannot classify an empty feature map")
    logits = fmap.features @ w.T + b
    return LevelPredictions(fmap.level, fmap.codes, logits)


def classify_backward(dlogits, fmap, w):
    w2 = np.asarray(w).reshape(3, -1)
    dw = (dlogits.T @ fmap.features).reshape(np.shape(w))
    db = dlogits.sum(axis=0)
    dx = dlogits @ w2
    return dx, dw, db


def argmax_states(probs):
    """Argmax with exact ties resolved Mixed > Filled > Empty."""
    p0, p1, p2 = probs[:, 0], probs[:, 1], probs[:, 2]
    out = np.where(p1 >= p0, CellState.FILLED, CellState.EMPTY).astype(np.int8)
    out[(p2 >= p0) & (p2 >= p1)] = CellState.MIXED
    return out


def level_loss(preds, gt, loss_codes):
    """Mean cross-entropy over ``loss_codes`` and gradient w.r.t. all logits."""
    loss_codes = np.asarray(loss_codes, dtype=np.int64)
    dlogits = np.zeros_like(preds.logits)
    if not loss_codes.size:
        return 0.0, dlogits
    pos = HashIndex(preds.codes).lookup(loss_codes)
    if (pos < 0).any():
        raise ContractError("loss cell without a prediction")
    targets = gt.query_codes(preds.level, loss_codes)
    losses, grad = softmax_cross_entropy(preds.logits[pos], targets)
    n = loss_codes.size
    np.add.at(dlogits, pos, grad / n)
    return float(losses.sum() / n), dlogits


def ogn_loss(preds_per_level, gt, loss_sets):
    """Sum over levels of the per-level mean cross-entropy."""
    total = 0.0
    grads = []
    for preds, codes in zip(preds_per_level, loss_sets):
        value, d = level_loss(preds, gt, codes)
        total += value
        grads.append(d)
    return total, grads


def mixed_mask(preds, mode, gt=None):
    if mode == PROP_KNOWN:
        if gt is None:
            raise ContractError("Prop-known propagation needs the ground-truth octree")
        return gt.query_codes(preds.level, preds.codes) == CellState.MIXED
    if mode == PROP_PRED:
        return preds.states() == CellState.MIXED
    raise ContractError(f"unknown propagation mode {mode!r}")


def halo_rows(fmap, mixed, halo):
    """Rows of ``fmap`` lying within ``halo`` offsets of any mixed row.

    ``mixed`` is a boolean mask over the rows of ``fmap``.
    """
    lo, hi = halo
    if lo > 0 or hi < 0:
        raise ConfigError("halo must contain the mixed cell itself")
    if lo == 0 and hi == 0:
        return np.flatnonzero(mixed)
    mixed_codes = fmap.codes[mixed]
    if not mixed_codes.size:
        return np.zeros(0, dtype=np.int64)
    r = np.arange(lo, hi + 1)
    offs = np.stack(np.meshgrid(r, r, r, indexing="ij")).reshape(3, 1, -1)
    xyz = np.stack(decode_codes(mixed_codes))[:, :, None] + offs
    ok = _in_grid(xyz[0], xyz[1], xyz[2], fmap.resolution)
    codes = encode_codes(xyz[0][ok], xyz[1][ok], xyz[2][ok])
    rows = fmap.index.lookup(np.unique(codes))
    return np.sort(rows[rows >= 0])


class Propagation(NamedTuple):
    fmap: SparseFeatureMap  # F_l, the features handed to the next block
    mixed_codes: np.ndarray
    mixed: np.ndarray  # boolean mask over the rows of the input map
    rows: np.ndarray  # rows of the input map kept in F_l


def propagate(fmap, preds, mode, gt=None, halo=(0, 0)):
    """Keep features of mixed cells and of their halo neighbours; drop the rest."""
    if not np.array_equal(preds.codes, fmap.codes):
        raise ContractError("predictions must cover the feature map")
    mixed = mixed_mask(preds, mode, gt)
    rows = halo_rows(fmap, mixed, halo)
    return Propagation(fmap.subset(rows), fmap.codes[mixed], mixed, rows)
