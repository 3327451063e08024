"""IoU evaluation, scaling benchmark and shift experiment."""

import copy
import csv
import math
import statistics
import time
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .config import load_network_config
from .datasets import shift_grid
from .layers import PROP_KNOWN, PROP_PRED
from .model import build_network
from .nn import trilinear_upsample
from .octree import Octree, from_voxel_grid, to_voxel_grid

THRESHOLD = 0.5


def iou(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def upsample_binary(grid, resolution):
    """Trilinear upsampling of an occupancy grid, then binarization at 0.5."""
    grid = np.asarray(grid)
    target = tuple(resolution) if np.ndim(resolution) else (resolution,) * 3
    if grid.shape == target:
        return grid.astype(bool)
    for n, m in zip(grid.shape, target):
        r = m // n
        if m % n or r & (r - 1):
            raise ValueError(f"cannot upsample {grid.shape} to {target}: ratio must be a power of two")
    return trilinear_upsample(grid.astype(np.float64), target) >= THRESHOLD


def evaluate(pred, gt):
    """IoU of a predicted octree (or grid) against a possibly finer ground-truth grid."""
    grid = to_voxel_grid(pred) if isinstance(pred, Octree) else np.asarray(pred)
    gt = np.asarray(gt, dtype=bool)
    return iou(upsample_binary(grid, gt.shape), gt)


# -- live scalar counting ----------------------------------------------------------


def _trunk_scalars(inputs, cache):
    total = int(np.asarray(inputs).size)
    for entry in cache:
        total += int(entry[1].size)
    return total


def ogn_live_scalars(result):
    """Feature scalars plus stored keys kept alive by one OGN forward pass."""
    total = _trunk_scalars(np.zeros(0), result.trunk_cache)
    for sample in result.samples:
        for rec in sample.records:
            total += rec.fmap.features.size + rec.fmap.codes.size
            total += rec.preds.logits.size
            if rec.block_state is not None:
                _, outputs = rec.block_state
                for out in outputs[:-1]:  # last output is ``rec.fmap`` itself
                    total += out.features.size + out.codes.size
    return total


def dense_live_scalars(out):
    total = _trunk_scalars(np.zeros(0), out["cache"])
    total += sum(int(t[1].size) for t in out["tail"])
    return total + int(out["logits"].size)


# -- scaling benchmark ---------------------------------------------------------------


class BenchRow(NamedTuple):
    repr: str
    resolution: int
    elements: int
    live_scalars: int
    seconds: float
    batch: int = 1


def slim_config(resolution, preset="slim-appendixA"):
    """Slim one-channel decoder cut to the requested output resolution."""
    cfg = load_network_config(preset)
    d = copy.deepcopy(cfg.to_dict())
    base = cfg.base_resolution()[0]
    n = int(round(math.log2(resolution / base)))
    if base << n != resolution or n < 0:
        raise ValueError(f"resolution {resolution} not reachable from base {base}")
    if n > len(d["blocks"]):
        d["blocks"] = d["blocks"] + [copy.deepcopy(d["blocks"][-1])] * (n - len(d["blocks"]))
    d["blocks"] = d["blocks"][:n]
    d["name"] = f"{d['name']}-{resolution}"
    return load_network_config(d)


def bench_shape(family, resolution):
    if family != "sphere":
        from .datasets import synth_toy_shape

        return synth_toy_shape(family, seed=0, resolution=resolution)
    c = (resolution - 1) / 2.0
    x, y, z = np.ogrid[:resolution, :resolution, :resolution]
    r = 0.35 * resolution
    return (x - c) ** 2 + (y - c) ** 2 + (z - c) ** 2 <= r * r


def _timed(fn, repeats):
    times = []
    out = None
    for _ in range(repeats):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return out, statistics.median(times)


def scaling_benchmark(family="sphere", resolutions=(32, 64, 128, 256), preset="slim-appendixA",
                      repeats=3, time_dense_up_to=None, seed=0, log=None):
    """One forward+backward per representation and resolution (batch 1).

    The OGN runs in Prop-known mode on the shape's own octree, so the measured
    structure is that of the data. Dense runs above ``time_dense_up_to`` are
    counted analytically only and report ``nan`` seconds.
    """
    rows = []
    x = np.ones((1, 1))
    for res in resolutions:
        cfg = slim_config(res, preset)
        grid = bench_shape(family, res)
        octree = from_voxel_grid(grid, cfg.base_resolution())
        ogn = build_network(cfg, seed, "ogn")
        result = ogn.forward(x, PROP_KNOWN, [octree])
        _, secs = _timed(lambda: ogn.backward(ogn.forward(x, PROP_KNOWN, [octree])), repeats)
        rows.append(BenchRow("octree", res, len(octree), ogn_live_scalars(result), secs))
        if log:
            log(rows[-1])
        del result
        dense = build_network(cfg, seed, "dense")
        g = grid[None]
        if time_dense_up_to is None or res <= time_dense_up_to:
            out = dense.forward(x, g)
            live = dense_live_scalars(out)
            del out
            _, secs = _timed(lambda: dense.backward(dense.forward(x, g)), repeats)
        else:
            live = dense_live_scalars_analytic(dense)
            secs = float("nan")
        rows.append(BenchRow("dense", res, grid.size, live, secs))
        if log:
            log(rows[-1])
    return rows


def dense_live_scalars_analytic(dense):
    """Same count as :func:`dense_live_scalars` without running the network."""
    cfg = dense.config
    total = 0
    for layer in cfg.encoder:
        total += layer["out"]  # one-hot / vector encoders only
    res, c = cfg.dense_input()
    n = int(np.prod(res))
    for layer in cfg.dense.get("layers", []) + [l for b in cfg.blocks for l in b]:
        if layer["type"] == "upconv":
            n *= layer.get("stride", 2) ** 3
        total += n * layer["out"]
    return total + 2 * n


def fit_loglog_slope(rows, metric="live_scalars", representation=None, exclude_smallest=True):
    """Least-squares exponent of ``metric`` against resolution on log-log axes."""
    pts = [
        (r.resolution, getattr(r, metric) if hasattr(r, metric) else r[metric])
        for r in rows
        if representation is None or r.repr == representation
    ]
    pts.sort()
    if exclude_smallest and len(pts) > 2:
        pts = pts[1:]
    pts = [(a, b) for a, b in pts if b == b and b > 0]
    if len(pts) < 2:
        raise ValueError("need at least two points to fit a slope")
    lx = np.log([p[0] for p in pts])
    ly = np.log([p[1] for p in pts])
    slope, _ = np.polyfit(lx, ly, 1)
    return float(slope)


# -- shift experiment -------------------------------------------------------------------


class ShiftRow(NamedTuple):
    shift: int
    iou_ogn: float
    iou_dense: float


def shift_experiment(net_ogn, net_dense, grids, shifts, axis=2):
    """Mean Prop-pred IoU of both nets on inputs shifted along ``axis``."""
    grids = np.asarray(grids, dtype=bool)
    rows = []
    for s in shifts:
        shifted = np.stack([shift_grid(g, s, axis) for g in grids])
        x = shifted[:, None].astype(np.float64)
        a = b = float("nan")
        if net_ogn is not None:
            preds = net_ogn.predict(x, PROP_PRED)
            a = float(np.mean([evaluate(p, g) for p, g in zip(preds, shifted)]))
        if net_dense is not None:
            dense_pred = net_dense.predict_grids(x)
            b = float(np.mean([iou(p, g) for p, g in zip(dense_pred, shifted)]))
        rows.append(ShiftRow(int(s), a, b))
    return rows


# -- reports --------------------------------------------------------------------------------

REPORT_COLUMNS = {
    "bench": ("repr", "resolution", "elements", "live_scalars", "seconds"),
    "shift": ("shift", "iou_ogn", "iou_dense"),
    "eval": ("sample_id", "resolution", "iou"),
}


def _row_dict(row):
    if hasattr(row, "_asdict"):
        return row._asdict()
    return dict(row)


def report_write(rows, path, kind=None):
    """CSV with the column set of ``kind`` (inferred from the first row)."""
    rows = [_row_dict(r) for r in rows]
    if kind is None:
        keys = set(rows[0]) if rows else set()
        kind = next((k for k, cols in REPORT_COLUMNS.items() if set(cols) <= keys), None)
        if kind is None:
            raise ValueError("cannot infer report kind")
    cols = REPORT_COLUMNS[kind]
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    return kind


def read_report(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
