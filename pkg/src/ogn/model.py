"""Networks assembled from a :class:`~ogn.config.NetworkConfig`.

Both decoders share a dense trunk (encoder + dense block) that runs batched on
regular grids. The OGN then switches to per-sample sparse feature maps: every
sample has its own octree structure, so blocks are run sample by sample and
their gradients summed in a fixed order.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .config import NetworkConfig, load_network_config
from .layers import (
    PROP_KNOWN,
    PROP_PRED,
    ContractError,
    LevelPredictions,
    SparseFeatureMap,
    block_backward,
    block_forward,
    children_codes,
    classify_backward,
    classify_cells,
    halo_rows,
    level_loss,
    mixed_mask,
)
from .octree import CellState, Octree, decode_codes, encode_codes


class EarlyTerminationWarning(UserWarning):
    """No mixed cells were left before the final level."""


def _crop(y, n):
    return y[(slice(None), slice(None)) + tuple(slice(0, m) for m in n)]


def _uncrop(dy, shape):
    out = np.zeros(shape)
    out[tuple(slice(0, m) for m in dy.shape)] = dy
    return out


def _dense_layer_forward(layer, w, b, x):
    if layer["type"] == "upconv":
        s = layer.get("stride", 2)
        y = nn.upconv3d(x, w, b, s)
        return _crop(y, [m * s for m in x.shape[2:]]), y.shape
    k = layer["k"]
    return nn.conv3d(x, w, b, layer.get("stride", 1), layer.get("pad", (k - 1) // 2)), None


def _dense_layer_backward(layer, w, x, dy, full_shape):
    if layer["type"] == "upconv":
        if full_shape != dy.shape:
            dy = _uncrop(dy, full_shape)
        return nn.upconv3d_backward(dy, x, w, layer.get("stride", 2))
    k = layer["k"]
    return nn.conv3d_backward(dy, x, w, layer.get("stride", 1), layer.get("pad", (k - 1) // 2))


def _dense_layer_shape(layer, c_in):
    k = layer["k"]
    if layer["type"] == "upconv":
        return (c_in, layer["out"], k, k, k), c_in * k ** 3, layer["out"] * k ** 3
    return (layer["out"], c_in, k, k, k), c_in * k ** 3, layer["out"] * k ** 3


class Network:
    """Parameters plus the shared encoder/dense-block trunk."""

    kind = "base"

    def __init__(self, config, seed=0):
        self.config = load_network_config(config)
        self.params = {}
        self._rng = np.random.default_rng(seed)
        self._init_trunk()

    # -- parameters -------------------------------------------------------

    def _add(self, name, shape, fan_in, fan_out, up=False):
        self.params[name + ".w"] = nn.glorot_uniform(shape, fan_in, fan_out, self._rng)
        self.params[name + ".b"] = np.zeros(shape[1] if up else shape[0])

    def _init_trunk(self):
        cfg = self.config
        if cfg.input_kind == "onehot":
            cur = ("vector", cfg.input_shape[0])
        else:
            cur = ("grid", cfg.input_shape[0])
        for i, layer in enumerate(cfg.encoder):
            name = f"enc.{i}"
            if layer["type"] == "fc":
                n_in = cur[1] if cur[0] == "vector" else None
                if n_in is None:
                    n_in = self._flat_size(i)
                self._add(name, (layer["out"], n_in), n_in, layer["out"])
                cur = ("vector", layer["out"])
            else:
                k = layer["k"]
                nd = 3 if layer["type"] == "conv3d" else 2
                shape = (layer["out"], cur[1]) + (k,) * nd
                self._add(name, shape, cur[1] * k ** nd, layer["out"] * k ** nd)
                cur = ("grid", layer["out"])
        c = cfg.dense["channels"]
        for i, layer in enumerate(cfg.dense.get("layers", [])):
            name = f"dense.{i}"
            shape, fi, fo = _dense_layer_shape(layer, c)
            self._add(name, shape, fi, fo, layer["type"] == "upconv")
            c = layer["out"]

    def _flat_size(self, upto):
        cfg = self.config
        shape = list(cfg.input_shape)
        for layer in cfg.encoder[:upto]:
            k, s = layer["k"], layer.get("stride", 1)
            p = layer.get("pad", (k - 1) // 2)
            shape = [layer["out"]] + [(n + 2 * p - k) // s + 1 for n in shape[1:]]
        return int(np.prod(shape))

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    # -- trunk ------------------------------------------------------------

    def trunk_forward(self, x):
        cfg = self.config
        h = np.asarray(x, dtype=np.float64)
        cache = []
        for i, layer in enumerate(cfg.encoder):
            w, b = self.params[f"enc.{i}.w"], self.params[f"enc.{i}.b"]
            h_in = h
            if layer["type"] == "fc":
                z = nn.fully_connected(h.reshape(h.shape[0], -1), w, b)
            else:
                k = layer["k"]
                z = nn.convnd(h, w, b, layer.get("stride", 1), layer.get("pad", (k - 1) // 2))
            h = nn.relu(z)
            cache.append((h_in, h))
        res, c = cfg.dense_input()
        if h.ndim == 2:
            h = h.reshape((h.shape[0], c) + res)
        for i, layer in enumerate(cfg.dense.get("layers", [])):
            w, b = self.params[f"dense.{i}.w"], self.params[f"dense.{i}.b"]
            h_in = h
            z, full = _dense_layer_forward(layer, w, b, h)
            h = nn.relu(z)
            cache.append((h_in, h, full))
        return h, cache

    def trunk_backward(self, dh, cache, grads):
        cfg = self.config
        n_enc = len(cfg.encoder)
        for i in range(len(cfg.dense.get("layers", [])) - 1, -1, -1):
            layer = cfg.dense["layers"][i]
            h_in, h, full = cache[n_enc + i]
            dz = nn.relu_backward(dh, h)
            dh, dw, db = _dense_layer_backward(layer, self.params[f"dense.{i}.w"], h_in, dz, full)
            grads[f"dense.{i}.w"] += dw
            grads[f"dense.{i}.b"] += db
        for i in range(n_enc - 1, -1, -1):
            layer = cfg.encoder[i]
            h_in, h = cache[i]
            dh = dh.reshape(h.shape)
            dz = nn.relu_backward(dh, h)
            w = self.params[f"enc.{i}.w"]
            if layer["type"] == "fc":
                flat = h_in.reshape(h_in.shape[0], -1)
                dh, dw, db = nn.fully_connected_backward(dz, flat, w)
                dh = dh.reshape(h_in.shape)
            else:
                k = layer["k"]
                dh, dw, db = nn.convnd_backward(
                    dz, h_in, w, layer.get("stride", 1), layer.get("pad", (k - 1) // 2)
                )
            grads[f"enc.{i}.w"] += dw
            grads[f"enc.{i}.b"] += db
        return dh

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}


@dataclass
class LevelRecord:
    fmap: SparseFeatureMap  # block output at this level
    preds: LevelPredictions
    loss_codes: np.ndarray  # cells entering this level's loss
    block_state: object = None  # state of the block that produced ``fmap``
    subdivide: np.ndarray = None  # rows treated as mixed when propagating
    kept_rows: np.ndarray = None  # rows forwarded to the next block


@dataclass
class SampleResult:
    records: list
    loss: float = 0.0
    dlogits: list = field(default_factory=list)
    finest_mixed: int = 0


@dataclass
class ForwardResult:
    samples: list
    trunk_cache: list
    trunk_out: np.ndarray
    mode: str
    loss: float = None

    @property
    def predictions(self):
        return [[r.preds for r in s.records] for s in self.samples]


class OGN(Network):
    """Octree generating decoder on top of the dense trunk."""

    kind = "ogn"

    def __init__(self, config, seed=0):
        super().__init__(config, seed)
        cfg = self.config
        self.base = cfg.base_resolution()
        self.block_specs = cfg.block_specs()
        # propagation neighbourhoods are fixed by the architecture
        self.halos = cfg.halos()
        for bi, block in enumerate(self.block_specs):
            for li, spec in enumerate(block):
                name = f"block.{bi}.{li}"
                k = spec.k
                up = spec.kind == "upconv"
                shape = (spec.c_in, spec.c_out, k, k, k) if up else (spec.c_out, spec.c_in, k, k, k)
                self._add(name, shape, spec.c_in * k ** 3, spec.c_out * k ** 3, up)
        channels = [cfg.base_channels()] + [b[-1].c_out for b in self.block_specs]
        for level, c in enumerate(channels):
            self._add(f"cls.{level}", (3, c), c, 3)
        self._perm = None

    @property
    def n_levels(self):
        return len(self.block_specs) + 1

    def _base_order(self):
        if self._perm is None:
            gx, gy, gz = np.meshgrid(*(np.arange(n) for n in self.base), indexing="ij")
            codes = encode_codes(gx.ravel(), gy.ravel(), gz.ravel())
            order = np.argsort(codes)
            self._perm = (codes[order], order)
        return self._perm

    def _block_params(self, bi):
        return [
            (self.params[f"block.{bi}.{li}.w"], self.params[f"block.{bi}.{li}.b"])
            for li in range(len(self.block_specs[bi]))
        ]

    def _check_gt(self, gt):
        if gt.base_resolution != self.base or gt.max_level != self.n_levels - 1:
            raise ContractError(
                f"ground truth octree (base {gt.base_resolution}, {gt.max_level + 1} levels) "
                f"does not match the network (base {self.base}, {self.n_levels} levels)"
            )

    def forward_sample(self, feat0, mode, gt=None):
        if mode not in (PROP_KNOWN, PROP_PRED):
            raise ContractError(f"unknown propagation mode {mode!r}")
        if mode == PROP_KNOWN and gt is None:
            raise ContractError("Prop-known forward needs the ground-truth octree")
        if gt is not None:
            self._check_gt(gt)
        codes, order = self._base_order()
        fbar = SparseFeatureMap(0, self.base, codes, feat0.reshape(feat0.shape[0], -1).T[order])
        loss_codes = codes
        state = None
        records = []
        for level in range(self.n_levels):
            preds = classify_cells(fbar, self.params[f"cls.{level}.w"], self.params[f"cls.{level}.b"])
            rec = LevelRecord(fbar, preds, loss_codes, state)
            records.append(rec)
            if level == self.n_levels - 1:
                break
            mixed = mixed_mask(preds, mode, gt)
            rec.subdivide = mixed
            if not mixed.any():
                warnings.warn(
                    f"no mixed cells at level {level}; octree terminates early",
                    EarlyTerminationWarning,
                    stacklevel=2,
                )
                break
            rows = halo_rows(fbar, mixed, self.halos[level])
            rec.kept_rows = rows
            targets = children_codes(fbar.codes[mixed])
            fbar, state = block_forward(fbar.subset(rows), self.block_specs[level], self._block_params(level), targets)
            loss_codes = targets
        result = SampleResult(records)
        if gt is not None:
            values = []
            for rec in records:
                value, d = level_loss(rec.preds, gt, rec.loss_codes)
                values.append(value)
                result.dlogits.append(d)
            result.loss = math.fsum(values)
        return result

    def forward(self, inputs, mode, gts=None):
        """Batched forward; ``gts`` is a list of octrees (needed for the loss)."""
        x = np.asarray(inputs, dtype=np.float64)
        feats, cache = self.trunk_forward(x)
        if gts is not None and len(gts) != len(feats):
            raise ContractError("one ground-truth octree per sample required")
        samples = [
            self.forward_sample(feats[i], mode, None if gts is None else gts[i])
            for i in range(len(feats))
        ]
        loss = math.fsum(s.loss for s in samples) / len(samples) if gts is not None else None
        return ForwardResult(samples, cache, feats, mode, loss)

    def backward_sample(self, sample, grads, scale):
        d_next = None
        for level in range(len(sample.records) - 1, -1, -1):
            rec = sample.records[level]
            w = self.params[f"cls.{level}.w"]
            dx, dw, db = classify_backward(sample.dlogits[level] * scale, rec.fmap, w)
            grads[f"cls.{level}.w"] += dw
            grads[f"cls.{level}.b"] += db
            if d_next is not None:
                dx[rec.kept_rows] += d_next
            if level > 0:
                d_next, bgrads = block_backward(dx, rec.block_state)
                for li, (gw, gb) in enumerate(bgrads):
                    grads[f"block.{level - 1}.{li}.w"] += gw
                    grads[f"block.{level - 1}.{li}.b"] += gb
            else:
                _, order = self._base_order()
                d0 = np.zeros((dx.shape[1], order.size))
                d0[:, order] = dx.T
                return d0.reshape((dx.shape[1],) + self.base)

    def backward(self, result):
        grads = self.zero_grads()
        n = len(result.samples)
        d_trunk = np.zeros_like(result.trunk_out)
        for i, sample in enumerate(result.samples):
            d_trunk[i] = self.backward_sample(sample, grads, 1.0 / n)
        self.trunk_backward(d_trunk, result.trunk_cache, grads)
        return grads

    def loss_and_grads(self, inputs, gts, mode):
        result = self.forward(inputs, mode, gts)
        return result.loss, self.backward(result), result

    # -- inference ----------------------------------------------------------

    def octree_from_sample(self, sample, mode):
        """Leaves implied by one sample's predictions.

        Prop-known keeps the propagated structure and reads each leaf's value
        from the Empty/Filled probabilities; Prop-pred uses the argmax state.
        A Mixed prediction at the finest level is resolved as Filled.
        """
        levels = []
        finest_mixed = 0
        for rec in sample.records:
            pos = rec.preds.codes.searchsorted(rec.loss_codes)
            probs = rec.preds.probs[pos]
            leaf = np.ones(pos.size, dtype=bool) if rec.subdivide is None else ~rec.subdivide[pos]
            if mode == PROP_KNOWN:
                values = (probs[:, 1] >= probs[:, 0]).astype(np.int8)
            else:
                states = rec.preds.states()[pos]
                finest_mixed += int((leaf & (states == CellState.MIXED)).sum())
                values = (states != CellState.EMPTY).astype(np.int8)
            levels.append((rec.loss_codes[leaf], values[leaf]))
        while len(levels) < self.n_levels:
            levels.append((np.zeros(0, np.int64), np.zeros(0, np.int8)))
        sample.finest_mixed = finest_mixed
        return Octree(self.base, self.n_levels - 1, levels)

    def predict(self, inputs, mode=PROP_PRED, gts=None):
        result = self.forward(inputs, mode, gts if mode == PROP_KNOWN else None)
        return [self.octree_from_sample(s, mode) for s in result.samples]


class DenseBaseline(Network):
    """Same layers on regular grids; a 1x1x1 two-way classifier at the end only."""

    kind = "dense"

    def __init__(self, config, seed=0):
        super().__init__(config, seed)
        cfg = self.config
        self.tail = []
        c = cfg.base_channels()
        for bi, block in enumerate(cfg.blocks):
            for li, layer in enumerate(block):
                name = f"block.{bi}.{li}"
                shape, fi, fo = _dense_layer_shape(layer, c)
                self._add(name, shape, fi, fo, layer["type"] == "upconv")
                self.tail.append((name, layer))
                c = layer["out"]
        self._add("out", (2, c), c, 2)

    def init_output_prior(self, occupancy):
        """Set the output bias to the log-odds of ``occupancy``.

        With zero bias the first updates push every feature towards the
        majority class at once and the ReLUs of the last layers die.
        """
        p = float(np.clip(occupancy, 1e-3, 1 - 1e-3))
        self.params["out.b"][:] = (0.0, math.log(p / (1 - p)))

    def forward(self, inputs, gts=None):
        h, cache = self.trunk_forward(np.asarray(inputs, dtype=np.float64))
        tail_cache = []
        for name, layer in self.tail:
            h_in = h
            z, full = _dense_layer_forward(layer, self.params[name + ".w"], self.params[name + ".b"], h)
            h = nn.relu(z)
            tail_cache.append((h_in, h, full))
        w = self.params["out.w"]
        logits = np.einsum("oc,ncxyz->noxyz", w, h) + self.params["out.b"].reshape(1, 2, 1, 1, 1)
        out = {"cache": cache, "tail": tail_cache, "h": h, "logits": logits}
        if gts is not None:
            targets = np.asarray(gts).astype(np.int64)
            if targets.shape != (logits.shape[0],) + logits.shape[2:]:
                raise ContractError(f"ground truth shape {targets.shape} does not match output {logits.shape}")
            lg = np.moveaxis(logits, 1, -1)
            losses, grad = nn.softmax_cross_entropy(lg, targets)
            per_sample = losses.reshape(losses.shape[0], -1).mean(axis=1)
            out["loss"] = math.fsum(per_sample) / len(per_sample)
            out["dlogits"] = np.moveaxis(grad, -1, 1) / losses.size
        return out

    def backward(self, out):
        grads = self.zero_grads()
        dlogits = out["dlogits"]
        h = out["h"]
        grads["out.w"] += np.einsum("noxyz,ncxyz->oc", dlogits, h)
        grads["out.b"] += dlogits.sum(axis=(0, 2, 3, 4))
        dh = np.einsum("oc,noxyz->ncxyz", self.params["out.w"], dlogits)
        for (name, layer), (h_in, h_out, full) in zip(reversed(self.tail), reversed(out["tail"])):
            dz = nn.relu_backward(dh, h_out)
            dh, dw, db = _dense_layer_backward(layer, self.params[name + ".w"], h_in, dz, full)
            grads[name + ".w"] += dw
            grads[name + ".b"] += db
        self.trunk_backward(dh, out["cache"], grads)
        return grads

    def loss_and_grads(self, inputs, gts, mode=None):
        out = self.forward(inputs, gts)
        return out["loss"], self.backward(out), out

    def predict_grids(self, inputs):
        logits = self.forward(inputs)["logits"]
        return logits[:, 1] > logits[:, 0]


def build_network(config, seed=0, kind="ogn"):
    """Allocate and initialise an OGN (``kind="ogn"``) or its dense baseline."""
    if not isinstance(config, NetworkConfig):
        config = load_network_config(config)
    if kind == "ogn":
        return OGN(config, seed)
    if kind == "dense":
        return DenseBaseline(config, seed)
    raise ValueError(f"unknown network kind {kind!r}")
