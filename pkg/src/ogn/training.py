"""Training loop, checkpoints and inference."""

import csv
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .config import NetworkConfig, TrainSchedule, load_schedule
from .layers import PROP_KNOWN, PROP_PRED
from .model import OGN, build_network
from .octree import from_voxel_grid

log = logging.getLogger(__name__)

CKPT_MAGIC = b"OGNCKPT1"


class CheckpointError(ValueError):
    pass


# -- checkpoints -------------------------------------------------------------


def checkpoint_bytes(net, adam=None, extra=None):
    """Serialize parameters (and optional ADAM state) to bytes.

    Layout: magic, u32 manifest length, JSON manifest, then raw little-endian
    float64 arrays in manifest order.
    """
    arrays, entries = [], []
    offset = 0

    def add(group, name, a):
        nonlocal offset
        a = np.ascontiguousarray(a, dtype="<f8")
        entries.append({"group": group, "name": name, "shape": list(a.shape), "offset": offset})
        arrays.append(a.tobytes())
        offset += a.nbytes

    for name in sorted(net.params):
        add("param", name, net.params[name])
    if adam is not None:
        for name in sorted(adam.m):
            add("adam_m", name, adam.m[name])
            add("adam_v", name, adam.v[name])
    manifest = {
        "kind": net.kind,
        "config": net.config.to_dict(),
        "config_digest": net.config.digest(),
        "adam_t": None if adam is None else adam.t,
        "arrays": entries,
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    return CKPT_MAGIC + struct.pack("<I", len(head)) + head + b"".join(arrays)


def checkpoint_from_bytes(blob):
    """Inverse of :func:`checkpoint_bytes`: ``(net, adam_or_None, extra)``."""
    if blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = len(CKPT_MAGIC)
    if len(blob) < pos + 4:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    try:
        manifest = json.loads(blob[pos : pos + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from None
    pos += n
    config = NetworkConfig.from_dict(manifest["config"])
    if config.digest() != manifest["config_digest"]:
        raise CheckpointError("config digest mismatch")
    net = build_network(config, 0, manifest["kind"])
    adam = None if manifest["adam_t"] is None else nn.AdamState(t=manifest["adam_t"])
    payload = memoryview(blob)[pos:]
    for e in manifest["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + 8 * count > len(payload):
            raise CheckpointError("truncated checkpoint payload")
        a = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"]).reshape(e["shape"]).astype(np.float64)
        if e["group"] == "param":
            if net.params[e["name"]].shape != a.shape:
                raise CheckpointError(f"shape mismatch for {e['name']}")
            net.params[e["name"]] = a
        elif e["group"] == "adam_m":
            adam.m[e["name"]] = a
        else:
            adam.v[e["name"]] = a
    return net, adam, manifest["extra"]


def save_checkpoint(path, net, adam=None, extra=None):
    Path(path).write_bytes(checkpoint_bytes(net, adam, extra))


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())


# -- data --------------------------------------------------------------------


@dataclass
class TrainingSet:
    """Network inputs with their ground-truth grids (octrees built lazily)."""

    inputs: np.ndarray
    grids: np.ndarray
    base: tuple
    ids: list = None
    _octrees: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.inputs)

    def octree(self, i):
        if i not in self._octrees:
            self._octrees[i] = from_voxel_grid(self.grids[i], self.base)
        return self._octrees[i]

    def batch(self, rows):
        return self.inputs[rows], [self.octree(i) for i in rows], self.grids[rows]


def _batch_order(rng, n, batch_size, steps):
    """Epoch-wise shuffled sample rows for ``steps`` batches."""
    order = []
    need = steps * batch_size
    while len(order) < need:
        order.extend(rng.permutation(n).tolist())
    return np.array(order[:need], dtype=np.int64).reshape(steps, batch_size)


# -- training ----------------------------------------------------------------


def train_step(net, batch, schedule, mode, adam, lr):
    """One optimizer step; returns the batch loss (averaged over samples)."""
    inputs, octrees, grids = batch
    if net.kind == "ogn":
        loss, grads, _ = net.loss_and_grads(inputs, octrees, mode)
    else:
        loss, grads, _ = net.loss_and_grads(inputs, grids)
    nn.adam_step(net.params, grads, adam, lr, schedule.beta1, schedule.beta2, schedule.eps)
    return loss


def phases(schedule):
    """``[(mode, steps, fixed_lr_or_None), ...]`` for a schedule's regime."""
    if schedule.regime == "known":
        return [(PROP_KNOWN, schedule.total_steps, None)]
    if schedule.regime == "pred":
        return [(PROP_PRED, schedule.total_steps, None)]
    return [(PROP_KNOWN, schedule.total_steps, None), (PROP_PRED, schedule.finetune_steps, schedule.final_lr)]


@dataclass
class TrainResult:
    net: object
    adam: nn.AdamState
    log: list  # (step, loss, lr, mode)
    checkpoints: list
    rng: np.random.Generator = None


def train(config, data, schedule, seed=0, out_dir=None, kind="ogn", stop_after=None, callback=None):
    """Train from scratch; deterministic for fixed ``seed`` and data order.

    With ``out_dir`` the loss log goes to ``loss.csv`` and checkpoints to
    ``ckpt-<step>.bin`` / ``final.bin``. ``stop_after`` ends the run after
    that many phases (used to snapshot a model before Prop-pred fine-tuning).
    A dense baseline starts with its output bias at the training-set occupancy.
    """
    schedule = load_schedule(schedule) if not isinstance(schedule, TrainSchedule) else schedule
    init_seq, data_seq = np.random.SeedSequence(seed).spawn(2)
    net = build_network(config, int(init_seq.generate_state(1)[0]), kind)
    if kind == "dense":
        net.init_output_prior(np.mean(data.grids))
    rng = np.random.default_rng(data_seq)
    return continue_training(net, data, schedule, rng, nn.AdamState(), out_dir, stop_after, callback)


def continue_training(net, data, schedule, rng, adam, out_dir=None, stop_after=None, callback=None, start_phase=0, step0=0):
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows, ckpts = [], []
    step = step0
    plan = phases(schedule)
    if net.kind != "ogn":
        plan = [("dense", schedule.total_steps, None)]
    for pi, (mode, n_steps, fixed_lr) in enumerate(plan):
        if pi < start_phase:
            continue
        if stop_after is not None and pi >= stop_after:
            break
        batches = _batch_order(rng, len(data), min(schedule.batch_size, len(data)), n_steps)
        for i, rows_i in enumerate(batches):
            lr = fixed_lr if fixed_lr is not None else schedule.lr_at(i)
            loss = train_step(net, data.batch(rows_i), schedule, mode, adam, lr)
            rows.append((step, loss, lr, mode))
            step += 1
            if callback is not None:
                callback(step, loss, lr, mode)
            if out is not None and schedule.checkpoint_every and step % schedule.checkpoint_every == 0:
                p = out / f"ckpt-{step}.bin"
                save_checkpoint(p, net, adam, {"step": step, "mode": mode})
                ckpts.append(p)
        log.info("phase %s finished after %d steps, last loss %.6f", mode, step, rows[-1][1] if rows else float("nan"))
    if out is not None:
        write_loss_csv(out / "loss.csv", rows)
        p = out / "final.bin"
        save_checkpoint(p, net, adam, {"step": step})
        ckpts.append(p)
    return TrainResult(net, adam, rows, ckpts, rng)


def write_loss_csv(path, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "lr", "mode"])
    for step, loss, lr, mode in rows:
        w.writerow([step, repr(float(loss)), repr(float(lr)), mode])
    Path(path).write_text(buf.getvalue())


# -- inference ---------------------------------------------------------------


def infer(net, inputs, mode=PROP_PRED, gts=None):
    """Octrees (OGN) or boolean grids (dense net) for a batch of inputs."""
    if isinstance(net, OGN):
        return net.predict(inputs, mode, gts)
    return list(net.predict_grids(inputs))
