"""Desk-scale experiment runners shared by the CLI and the acceptance suite."""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .config import load_network_config, load_preset, load_schedule, scaled_drops
from .datasets import ManifestRecord, make_split, one_hot, toy_corpus, toy_scene
from .evaluation import evaluate, iou
from .layers import PROP_KNOWN, PROP_PRED
from .training import TrainingSet, checkpoint_bytes, checkpoint_from_bytes, continue_training, train

log = logging.getLogger(__name__)


def preset_schedule(preset, **overrides):
    d = load_preset(preset)
    sched = load_schedule(d.get("schedule", {}))
    if "total_steps" in overrides and "lr_drops" not in overrides:
        overrides["lr_drops"] = scaled_drops(overrides["total_steps"])
    return replace(sched, **overrides)


@dataclass
class ToySplit:
    train_ids: list
    test_ids: list
    train: np.ndarray
    test: np.ndarray


def toy_split(n=64, resolution=32, seed=0):
    ids, grids = toy_corpus(n, resolution, seed)
    records = make_split([ManifestRecord(i, "") for i in ids], 0.8, seed)
    tr = [k for k, r in enumerate(records) if r.split == "train"]
    te = [k for k, r in enumerate(records) if r.split == "test"]
    return ToySplit([ids[k] for k in tr], [ids[k] for k in te], grids[tr], grids[te])


def voxel_inputs(grids):
    return np.asarray(grids, dtype=np.float64)[:, None]


def ogn_test_iou(net, grids, mode, batch=8):
    """Mean IoU over ``grids`` of an autoencoding OGN in ``mode``."""
    scores = []
    for i in range(0, len(grids), batch):
        g = grids[i : i + batch]
        gts = None
        if mode == PROP_KNOWN:
            data = TrainingSet(voxel_inputs(g), g, net.base)
            gts = [data.octree(k) for k in range(len(g))]
        for o, gt in zip(net.predict(voxel_inputs(g), mode, gts), g):
            scores.append(evaluate(o, gt))
    return float(np.mean(scores))


def dense_test_iou(net, grids, batch=8):
    scores = []
    for i in range(0, len(grids), batch):
        g = grids[i : i + batch]
        for p, gt in zip(net.predict_grids(voxel_inputs(g)), g):
            scores.append(iou(p, gt))
    return float(np.mean(scores))


@dataclass
class AutoencoderRun:
    known_ckpt: bytes
    finetuned_ckpt: bytes
    dense_ckpt: bytes
    scores: dict = field(default_factory=dict)
    losses: dict = field(default_factory=dict)


def run_autoencoder(preset="toy-fcn-32", schedule=None, seed=0, split=None, log_every=500, with_dense=True):
    """Train the OGN (Prop-known, then Prop-pred fine-tuning) and the dense baseline.

    Scores: ``known/known``, ``known/pred`` (Prop-known model tested both ways),
    ``pred/pred`` (fine-tuned model) and ``dense``.
    """
    cfg = load_network_config(preset)
    schedule = schedule or preset_schedule(preset)
    split = split or toy_split(resolution=cfg.output_resolution()[0], seed=seed)
    data = TrainingSet(voxel_inputs(split.train), split.train, cfg.base_resolution())

    def progress(tag):
        def cb(step, loss, lr, mode):
            if log_every and step % log_every == 0:
                log.info("%s step %d loss %.5f lr %g mode %s", tag, step, loss, lr, mode)

        return cb

    res = train(cfg, data, schedule, seed, stop_after=1, callback=progress("ogn"))
    known = checkpoint_bytes(res.net, res.adam)
    scores = {
        "known/known": ogn_test_iou(res.net, split.test, PROP_KNOWN),
        "known/pred": ogn_test_iou(res.net, split.test, PROP_PRED),
    }
    losses = {"known": res.log}
    ft = continue_training(res.net, data, schedule, res.rng, res.adam, start_phase=1,
                           step0=len(res.log), callback=progress("finetune"))
    scores["pred/pred"] = ogn_test_iou(ft.net, split.test, PROP_PRED)
    losses["finetune"] = ft.log
    run = AutoencoderRun(known, checkpoint_bytes(ft.net, ft.adam), None, scores, losses)
    if with_dense:
        dres = train(cfg, data, schedule, seed, kind="dense", callback=progress("dense"))
        run.dense_ckpt = checkpoint_bytes(dres.net, dres.adam)
        run.scores["dense"] = dense_test_iou(dres.net, split.test)
        run.losses["dense"] = dres.log
    return run


def load_nets(run):
    return {
        "known": checkpoint_from_bytes(run.known_ckpt)[0],
        "finetuned": checkpoint_from_bytes(run.finetuned_ckpt)[0],
        "dense": None if run.dense_ckpt is None else checkpoint_from_bytes(run.dense_ckpt)[0],
    }


# -- shape from ID --------------------------------------------------------------------


def scene_set(n_scenes, resolution):
    grids = np.stack([toy_scene(i, resolution) for i in range(n_scenes)])
    inputs = np.stack([one_hot(i, n_scenes) for i in range(n_scenes)])
    return inputs, grids


def run_shape_from_id(preset, n_scenes=4, schedule=None, seed=0, log_every=500):
    """Fit ``n_scenes`` scenes from one-hot IDs; returns ``(net, predictions, per-scene IoU)``."""
    cfg = load_network_config(preset)
    res = cfg.output_resolution()[0]
    inputs, grids = scene_set(n_scenes, res)
    data = TrainingSet(inputs, grids, cfg.base_resolution())
    schedule = schedule or preset_schedule(preset)

    def cb(step, loss, lr, mode):
        if log_every and step % log_every == 0:
            log.info("%s step %d loss %.5f lr %g mode %s", preset, step, loss, lr, mode)

    out = train(cfg, data, schedule, seed, callback=cb)
    preds = out.net.predict(inputs, PROP_PRED)
    return out.net, preds, [evaluate(p, g) for p, g in zip(preds, grids)]
