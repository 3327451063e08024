"""Acceptance criteria. Each test records one pass/fail line in the terminal summary.

Criteria 6 to 9 train networks for hours on one core. Set ``OGN_ACCEPT_CACHE``
to a directory to keep the trained runs (pickled with their wall time) so a
rerun only repeats the evaluation.
"""

import itertools
import os
import pickle
import time
from pathlib import Path

import numpy as np
import pytest

from ogn import nn
from ogn.cli import main
from ogn.datasets import ParseError, read_binvox, toy_scene, write_binvox
from ogn.evaluation import evaluate, fit_loglog_slope, scaling_benchmark, shift_experiment
from ogn.experiments import (
    load_nets,
    ogn_test_iou,
    run_autoencoder,
    run_shape_from_id,
    toy_split,
)
from ogn.layers import (
    PROP_KNOWN,
    PROP_PRED,
    LayerSpec,
    SparseFeatureMap,
    block_backward,
    block_forward,
    children_codes,
    classify_backward,
    classify_cells,
    compute_halo,
    dense_to_fmap,
    halo_rows,
    ogn_conv,
    ogn_conv_backward,
)
from ogn.model import build_network
from ogn.octree import decode_codes, encode_codes, from_voxel_grid, query, to_voxel_grid
from oracles import interleave_loop, linear_query, recursive_leaves, rle_pairs

UP2 = [LayerSpec("upconv", 2, 2, 3, 4)]
UP4 = [LayerSpec("upconv", 4, 2, 3, 4)]
UP2_C3 = [LayerSpec("upconv", 2, 2, 3, 4), LayerSpec("conv", 3, 1, 4, 3)]
UP4_C3 = [LayerSpec("upconv", 4, 2, 3, 4), LayerSpec("conv", 3, 1, 4, 3)]
BLOCKS = {"up2": UP2, "up4": UP4, "up2+c3": UP2_C3}


def _record(log, n, ok, detail):
    log.append((n, bool(ok), detail))
    assert ok, f"criterion {n}: {detail}"


def _params(layers, rng):
    out = []
    for s in layers:
        shape = (s.c_out, s.c_in) if s.kind == "conv" else (s.c_in, s.c_out)
        out.append((rng.normal(size=shape + (s.k,) * 3), rng.uniform(-0.2, 0.2, s.c_out)))
    return out


def _all_codes(n):
    g = np.meshgrid(*(np.arange(n),) * 3, indexing="ij")
    return np.sort(encode_codes(*(a.ravel() for a in g)))


def _dense_chain(x, layers, params, dy):
    """Dense forward and backward of a block: upconv cropped to 2n, convs padded, ReLU after each."""
    hs, fulls = [x[None]], []
    for s, (w, b) in zip(layers, params):
        h = hs[-1]
        if s.kind == "upconv":
            z = nn.upconv3d(h, w, b, s.stride)
            fulls.append(z.shape)
            n = h.shape[2:]
            z = z[:, :, : 2 * n[0], : 2 * n[1], : 2 * n[2]]
        else:
            z = nn.conv3d(h, w, b, 1, s.pad)
            fulls.append(None)
        hs.append(nn.relu(z))
    grads = [None] * len(layers)
    d = dy[None]
    for i in range(len(layers) - 1, -1, -1):
        s, (w, _) = layers[i], params[i]
        d = nn.relu_backward(d, hs[i + 1])
        if s.kind == "upconv":
            full = np.zeros(fulls[i])
            full[:, :, : d.shape[2], : d.shape[3], : d.shape[4]] = d
            d, dw, db = nn.upconv3d_backward(full, hs[i], w, s.stride)
        else:
            d, dw, db = nn.conv3d_backward(d, hs[i], w, 1, s.pad)
        grads[i] = (dw, db)
    return hs[-1][0], d[0], grads


def _cache(name, fn):
    """``(value, seconds)`` of ``fn()``, reused from ``OGN_ACCEPT_CACHE`` when present."""
    root = os.environ.get("OGN_ACCEPT_CACHE")
    path = Path(root) / f"{name}.pkl" if root else None
    if path is not None and path.exists():
        with open(path, "rb") as f:
            return pickle.load(f)
    t = time.perf_counter()
    value = fn()
    out = (value, time.perf_counter() - t)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            pickle.dump(out, f)
    return out


# -- 1. sparse/dense equivalence ------------------------------------------------------


def test_criterion_01_sparse_dense_equivalence(acceptance_log):
    t = time.perf_counter()
    worst = 0.0
    for vi, (name, layers) in enumerate(BLOCKS.items()):
        for seed in range(3):
            rng = np.random.default_rng(100 * vi + seed)
            params = _params(layers, rng)
            x = rng.normal(size=(3, 8, 8, 8))
            fm = dense_to_fmap(x, 0, (8, 8, 8))
            out, state = block_forward(fm, layers, params, _all_codes(16))
            dy = rng.normal(size=out.features.shape)
            dx, grads = block_backward(dy, state)
            cx, cy, cz = decode_codes(out.codes)
            dy_dense = np.zeros((out.channels, 16, 16, 16))
            dy_dense[:, cx, cy, cz] = dy.T
            ref, ref_dx, ref_grads = _dense_chain(x, layers, params, dy_dense)
            ix, iy, iz = decode_codes(fm.codes)
            errs = [np.abs(out.features.T - ref[:, cx, cy, cz]).max(), np.abs(dx.T - ref_dx[:, ix, iy, iz]).max()]
            for (dw, db), (rw, rb) in zip(grads, ref_grads):
                errs += [np.abs(dw - rw).max(), np.abs(db - rb).max()]
            worst = max(worst, *errs)
    secs = time.perf_counter() - t
    _record(acceptance_log, 1, worst < 1e-8 and secs < 10,
            f"max abs diff {worst:.2e} (< 1e-8) over 3 variants x 3 seeds, {secs:.1f} s (< 10 s)")


# -- 2. gradient integrity ------------------------------------------------------------------

TWO_LEVEL = {
    "name": "two-level",
    "input_kind": "onehot",
    "input_shape": [3],
    "encoder": [{"type": "fc", "out": 24}, {"type": "fc", "out": 64}],
    "dense": {"input_resolution": [2, 2, 2], "channels": 8, "layers": [{"type": "upconv", "k": 2, "out": 6}]},
    "blocks": [[{"type": "upconv", "k": 4, "out": 4}, {"type": "conv", "k": 3, "out": 3}]],
}


def _op_checks(rng):
    """Yield ``(name, loss_fn, params, grads)`` for every differentiable op."""
    x = rng.normal(size=(2, 2, 5, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    proj = rng.normal(size=nn.conv3d(x, w, b, 2, 1).shape)
    dx, dw, db = nn.conv3d_backward(proj, x, w, 2, 1)
    yield "conv3d", lambda: np.sum(proj * nn.conv3d(x, w, b, 2, 1)), {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db}

    x2 = rng.normal(size=(2, 2, 7, 7))
    w2 = rng.normal(size=(3, 2, 3, 3))
    p2 = rng.normal(size=nn.conv2d(x2, w2, b, 2, 1).shape)
    dx2, dw2, db2 = nn.conv2d_backward(p2, x2, w2, 2, 1)
    yield "conv2d", lambda: np.sum(p2 * nn.conv2d(x2, w2, b, 2, 1)), {"x": x2, "w": w2, "b": b}, {"x": dx2, "w": dw2, "b": db2}

    xu = rng.normal(size=(2, 3, 2, 2, 2))
    wu = rng.normal(size=(3, 2, 4, 4, 4))
    bu = rng.normal(size=2)
    pu = rng.normal(size=nn.upconv3d(xu, wu, bu, 2).shape)
    dxu, dwu, dbu = nn.upconv3d_backward(pu, xu, wu, 2)
    yield "upconv3d", lambda: np.sum(pu * nn.upconv3d(xu, wu, bu, 2)), {"x": xu, "w": wu, "b": bu}, {"x": dxu, "w": dwu, "b": dbu}

    xf = rng.normal(size=(4, 5))
    wf = rng.normal(size=(3, 5))
    bf = rng.normal(size=3)
    pf = rng.normal(size=(4, 3))
    dxf, dwf, dbf = nn.fully_connected_backward(pf, xf, wf)
    yield "fc", lambda: np.sum(pf * nn.fully_connected(xf, wf, bf)), {"x": xf, "w": wf, "b": bf}, {"x": dxf, "w": dwf, "b": dbf}

    xr = rng.normal(size=50)
    xr[np.abs(xr) < 0.05] += 0.1  # keep probes off the kink
    pr = rng.normal(size=50)
    yield "relu", lambda: np.sum(pr * nn.relu(xr)), {"x": xr}, {"x": nn.relu_backward(pr, nn.relu(xr))}

    logits = rng.normal(size=(6, 3))
    t = rng.integers(0, 3, 6)
    _, gl = nn.softmax_cross_entropy(logits, t)
    yield "softmax-ce", lambda: nn.softmax_cross_entropy(logits, t)[0].sum(), {"l": logits}, {"l": gl}

    for spec in (LayerSpec("conv", 3, 1, 2, 2), LayerSpec("upconv", 2, 2, 2, 2), LayerSpec("upconv", 4, 2, 2, 2)):
        fm = dense_to_fmap(rng.normal(size=(2, 3, 3, 3)), 0, (3, 3, 3))
        fm = fm.subset(np.flatnonzero(rng.random(len(fm)) < 0.6))
        ws = rng.normal(size=(2, 2) + (spec.k,) * 3)
        bs = rng.normal(size=2)
        codes = _all_codes(3 * spec.stride)
        codes = codes[rng.random(codes.size) < 0.5]
        ps = rng.normal(size=(codes.size, 2))
        feats = fm.features
        _, cache = ogn_conv(fm, ws, bs, spec, codes)
        dxs, dws, dbs = ogn_conv_backward(ps, cache)

        def f(fm=fm, feats=feats, ws=ws, bs=bs, spec=spec, codes=codes, ps=ps):
            m = SparseFeatureMap(0, (3, 3, 3), fm.codes, feats)
            return np.sum(ps * ogn_conv(m, ws, bs, spec, codes)[0].features)

        yield f"ogn-{spec.kind}{spec.k}", f, {"x": feats, "w": ws, "b": bs}, {"x": dxs, "w": dws, "b": dbs}

    fm = dense_to_fmap(rng.normal(size=(4, 2, 2, 2)), 1, (1, 1, 1))
    wc = rng.normal(size=(3, 4))
    bc = rng.normal(size=3)
    pc = rng.normal(size=(8, 3))
    dxc, dwc, dbc = classify_backward(pc, fm, wc)
    yield "classifier", lambda: np.sum(pc * classify_cells(fm, wc, bc).logits), {"x": fm.features, "w": wc, "b": bc}, {
        "x": dxc, "w": dwc, "b": dbc}


def _sphere(n, r, c=(0.5, 0.5, 0.5)):
    g = (np.arange(n) + 0.5) / n
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    return (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2 < r * r


def test_criterion_02_gradient_integrity(acceptance_log):
    t = time.perf_counter()
    rng = np.random.default_rng(7)
    parts = []
    for name, f, params, grads in _op_checks(rng):
        parts.append((name, nn.finite_difference_check(f, params, grads)))

    grids = [_sphere(8, 0.3), _sphere(8, 0.25, (0.4, 0.55, 0.5))]
    gts = [from_voxel_grid(g, (4, 4, 4)) for g in grids]
    x = np.eye(3)[:2]
    checked = 0
    for mode in (PROP_KNOWN, PROP_PRED):
        net = build_network(TWO_LEVEL, 3, "ogn")
        r = np.random.default_rng(11)
        for k, v in net.params.items():
            if k.endswith(".b") and not k.startswith("cls"):
                v[...] = r.uniform(0.02, 0.3, v.shape)  # keep hidden units away from ReLU kinks
        _, g, _ = net.loss_and_grads(x, gts, mode)
        worst, n, _ = nn.gradient_check(lambda: net.forward(x, mode, gts).loss, net.params, g, 1e-6,
                                        max_entries=6, rng=r, skip_kinks=True)
        parts.append((f"ogn-2-level-{mode}", worst))
        checked += n
    worst = max(e for _, e in parts)
    secs = time.perf_counter() - t
    name = max(parts, key=lambda p: p[1])[0]
    _record(acceptance_log, 2, worst < 1e-4 and checked > 60 and secs < 60,
            f"max relative error {worst:.2e} ({name}) over {len(parts)} checks, {secs:.1f} s (< 60 s)")


# -- 3. octree correctness ----------------------------------------------------------------------


def test_criterion_03_octree_correctness(acceptance_log):
    t = time.perf_counter()
    rng = np.random.default_rng(3)
    roundtrips = 0
    for i in range(600):
        n = (8, 16, 32)[i % 3]
        base = int(rng.choice([b for b in (1, 2, 4, 8) if n % b == 0]))
        if i % 2:
            g = rng.random((n, n, n)) < rng.uniform(0.02, 0.98)
        else:
            c = n // 4
            g = np.kron(rng.random((c, c, c)) < 0.5, np.ones((4, 4, 4), bool))
        roundtrips += np.array_equal(to_voxel_grid(from_voxel_grid(g, (base,) * 3)), g)

    queries = 0
    for _ in range(20):
        n = int(rng.choice([8, 16]))
        base = int(rng.choice([1, 2, 4]))
        g = np.kron(rng.random((n // 2,) * 3) < 0.5, np.ones((2, 2, 2), bool))
        o = from_voxel_grid(g, (base,) * 3)
        leaves, _ = recursive_leaves(g, (base,) * 3)
        for _ in range(50):
            level = int(rng.integers(0, o.max_level + 1))
            x, y, z = (int(v) for v in rng.integers(0, base << level, 3))
            queries += int(query(x, y, z, level, o)) == linear_query(leaves, x, y, z, level)

    n = 64
    x, y, z = (a.ravel() for a in np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij"))
    codes = encode_codes(x, y, z)
    dx, dy, dz = decode_codes(codes)
    morton = (np.array_equal(np.sort(codes), np.arange(n ** 3)) and np.array_equal(dx, x)
              and np.array_equal(dy, y) and np.array_equal(dz, z))
    sample = rng.integers(0, n ** 3, 2000)
    morton = morton and all(int(codes[i]) == interleave_loop(int(x[i]), int(y[i]), int(z[i])) for i in sample)
    secs = time.perf_counter() - t
    _record(acceptance_log, 3, roundtrips == 600 and queries == 1000 and morton and secs < 30,
            f"roundtrip {roundtrips}/600, query {queries}/1000, Morton level 6 {'ok' if morton else 'FAILED'}, "
            f"{secs:.1f} s (< 30 s)")


# -- 4. halo sufficiency ----------------------------------------------------------------------------


def _window_cells(layers, params, x, centre):
    """Input cells per axis whose perturbation changes the children of ``centre``."""
    fm = dense_to_fmap(x, 0, x.shape[1:])
    code = encode_codes(*(np.array([c]) for c in centre))
    targets = children_codes(code)
    ref = block_forward(fm, layers, params, targets)[0].features
    hit = set()
    for cell in itertools.product(*(range(n) for n in x.shape[1:])):
        y = x.copy()
        y[(slice(None),) + cell] += 1.0
        out = block_forward(dense_to_fmap(y, 0, x.shape[1:]), layers, params, targets)[0].features
        if np.abs(out - ref).max() > 0:
            hit.add(tuple(int(c) - int(k) for c, k in zip(cell, centre)))
    return [sorted({h[a] for h in hit}) for a in range(3)]


def test_criterion_04_halo_sufficiency(acceptance_log):
    t = time.perf_counter()
    identical = total = 0
    dense_diff = 0.0
    for vi, (name, layers) in enumerate(BLOCKS.items()):
        halo = compute_halo(layers)
        for seed in range(50):
            rng = np.random.default_rng(1000 * vi + seed)
            params = _params(layers, rng)
            x = rng.normal(size=(3, 6, 6, 6))
            fm = dense_to_fmap(x, 0, (6, 6, 6))
            mixed = rng.random(len(fm)) < rng.uniform(0.02, 0.3)
            mixed[rng.integers(len(fm))] = True
            kept = fm.subset(halo_rows(fm, mixed, halo))
            targets = children_codes(fm.codes[mixed])
            out, _ = block_forward(kept, layers, params, targets)
            complete, _ = block_forward(fm, layers, params, targets)
            identical += np.array_equal(out.codes, complete.codes) and np.array_equal(out.features, complete.features)
            total += 1
            # every output of the complete map agrees up to BLAS rounding
            full, _ = block_forward(fm, layers, params, _all_codes(12))
            pos = np.searchsorted(full.codes, out.codes)
            dense_diff = max(dense_diff, float(np.abs(out.features - full.features[pos]).max()))

    # 4^3 upconv followed by 3^3 conv: the children of one cell read four input cells per axis
    rng = np.random.default_rng(5)
    params = [(w, np.abs(b) + 1.0) for w, b in _params(UP4_C3, rng)]
    x = rng.normal(size=(3, 7, 7, 7)) + 1.0
    window = _window_cells(UP4_C3, params, x, (3, 3, 3))
    lo, hi = compute_halo(UP4_C3)
    four = window == [[-2, -1, 0, 1]] * 3 and (lo, hi) == (-2, 1)
    secs = time.perf_counter() - t
    ok = identical == total == 150 and dense_diff < 1e-12 and four and secs < 30
    _record(acceptance_log, 4, ok,
            f"identical {identical}/150 (all-outputs run within {dense_diff:.0e}), 4^3+3^3 halo {(lo, hi)} "
            f"window per axis {window[0]}, {secs:.1f} s (< 30 s)")


# -- 5. scaling ----------------------------------------------------------------------------------


def test_criterion_05_scaling(acceptance_log):
    t = time.perf_counter()
    rows = scaling_benchmark("sphere", (32, 64, 128, 256), repeats=3)
    secs = time.perf_counter() - t
    dense = fit_loglog_slope(rows, representation="dense", exclude_smallest=False)
    octree = fit_loglog_slope(rows, representation="octree", exclude_smallest=False)
    at = {r.repr: r.seconds for r in rows if r.resolution == 128}
    ok = abs(dense - 3.0) <= 0.1 and octree <= 2.4 and at["octree"] < at["dense"] and secs < 600
    _record(acceptance_log, 5, ok,
            f"slope dense {dense:.3f} (3.0 +- 0.1), octree {octree:.3f} (<= 2.4); "
            f"128^3 octree {at['octree']:.3f} s < dense {at['dense']:.3f} s; {secs:.0f} s (< 600 s)")


# -- 6, 7, 9. toy autoencoder -------------------------------------------------------------------


@pytest.fixture(scope="session")
def autoencoder():
    return _cache("autoencoder-toy-fcn-32", lambda: run_autoencoder("toy-fcn-32", log_every=1000))


@pytest.fixture(scope="session")
def ae_split():
    return toy_split(64, 32, 0)


def test_criterion_06_toy_autoencoder(acceptance_log, autoencoder):
    run, secs = autoencoder
    s = run.scores
    ok = (s["pred/pred"] >= 0.85 and s["known/known"] >= s["pred/pred"] - 0.01
          and abs(s["dense"] - s["pred/pred"]) <= 0.05 and secs < 7200)
    _record(acceptance_log, 6, ok,
            f"PropPred {s['pred/pred']:.4f} (>= 0.85), PropKnown {s['known/known']:.4f}, "
            f"dense {s['dense']:.4f} (+- 0.05), {secs / 60:.1f} min (< 120)")


def test_criterion_07_regime_matrix(acceptance_log, autoencoder, ae_split):
    run, _ = autoencoder
    t = time.perf_counter()
    nets = load_nets(run)
    kk = ogn_test_iou(nets["known"], ae_split.test, PROP_KNOWN)
    kp = ogn_test_iou(nets["known"], ae_split.test, PROP_PRED)
    pp = ogn_test_iou(nets["finetuned"], ae_split.test, PROP_PRED)
    secs = time.perf_counter() - t
    ok = kk >= pp - 0.01 and pp >= kp - 0.01 and secs < 900
    _record(acceptance_log, 7, ok,
            f"(K,K) {kk:.4f} >= (P,P) {pp:.4f} >= (K,P) {kp:.4f} with slack 0.01, {secs:.0f} s (< 900 s)")


def test_criterion_09_shift(acceptance_log, autoencoder, ae_split):
    run, _ = autoencoder
    nets = load_nets(run)
    net = nets["dense"]
    t = time.perf_counter()
    # embed test shapes in a 64^3 canvas at two z offsets 16 apart
    a = np.zeros((len(ae_split.test), 1, 64, 64, 64))
    a[:, 0, 16:48, 16:48, 8:40] = ae_split.test
    b = np.roll(a, 16, axis=4)
    la, lb = net.forward(a)["logits"], net.forward(b)["logits"]
    m = 16  # stay clear of the zero-padded borders
    inner_a = la[..., m:-m, m:-m, m : 64 - m - 16]
    inner_b = lb[..., m:-m, m:-m, m + 16 : 64 - m]
    logit_diff = float(np.abs(inner_a - inner_b).max())
    exact = np.array_equal(inner_a[:, 1] > inner_a[:, 0], inner_b[:, 1] > inner_b[:, 0]) and logit_diff < 1e-10

    rows = shift_experiment(nets["finetuned"], nets["dense"], ae_split.test, [0, 8])
    d_ogn = rows[0].iou_ogn - rows[1].iou_ogn
    d_dense = rows[0].iou_dense - rows[1].iou_dense
    secs = time.perf_counter() - t
    ok = exact and abs(d_ogn - d_dense) <= 0.05 and secs < 1200
    _record(acceptance_log, 9, ok,
            f"dense shift 16 interior max logit diff {logit_diff:.1e}, binary equal {exact}; IoU drop at shift 8 "
            f"OGN {d_ogn:.4f} vs dense {d_dense:.4f} (within 0.05), {secs / 60:.1f} min (< 20)")


# -- 8. shape from ID ------------------------------------------------------------------------------


@pytest.fixture(scope="session")
def shape_from_id():
    return _cache("shape-from-id", lambda: {
        64: run_shape_from_id("toy-id-64", 4, log_every=500),
        128: run_shape_from_id("toy-id-128", 4, log_every=500),
    })


def test_criterion_08_shape_from_id(acceptance_log, shape_from_id):
    runs, secs = shape_from_id
    _, preds64, ious64 = runs[64]
    _, preds128, ious128 = runs[128]
    gt128 = [toy_scene(i, 128) for i in range(4)]
    low = float(np.mean([evaluate(p, g) for p, g in zip(preds64, gt128)]))
    high = float(np.mean([evaluate(p, g) for p, g in zip(preds128, gt128)]))
    ok = min(ious64) >= 0.95 and low < high and secs < 3 * 3600
    _record(acceptance_log, 8, ok,
            f"64^3 per-scene IoU {', '.join(f'{v:.4f}' for v in ious64)} (>= 0.95); against 128^3 GT "
            f"64^3 net {low:.4f} < 128^3 net {high:.4f}; {secs / 60:.0f} min (< 180)")


# -- 10. format fidelity ---------------------------------------------------------------------------


def _file_order(grid):
    return grid.transpose(0, 2, 1).ravel()  # x slowest, then z, y fastest


def _oracle_file(grid, translate="0 0 0", scale="1"):
    dims = " ".join(str(d) for d in grid.shape)
    head = f"#binvox 1\ndim {dims}\ntranslate {translate}\nscale {scale}\ndata\n".encode()
    return head + rle_pairs(_file_order(grid))


def _edge_grids():
    flat = np.zeros(1000, bool)
    flat[:255] = True  # a run of exactly 255
    flat[255 + 256 : 255 + 256 + 9] = [1, 0, 1, 0, 1, 0, 1, 0, 1]
    yield flat.reshape(10, 10, 10).transpose(0, 2, 1)
    yield (np.arange(64) % 2).astype(bool).reshape(4, 4, 4).transpose(0, 2, 1)  # alternating in file order
    for n in (255, 510, 256, 254):
        f = np.zeros(8 * 8 * 8, bool)
        f[:n] = True
        yield f.reshape(8, 8, 8).transpose(0, 2, 1)
    yield np.ones((7, 9, 11), bool)
    yield np.zeros((16, 16, 16), bool)


def test_criterion_10_format_fidelity(acceptance_log, tmp_path):
    t = time.perf_counter()
    rng = np.random.default_rng(10)
    grids = list(_edge_grids())
    while len(grids) < 300:
        shape = tuple(int(v) for v in rng.integers(1, 24, 3))
        if len(grids) % 3 == 0:
            g = np.zeros(int(np.prod(shape)), bool)
            cut = np.sort(rng.integers(0, g.size, 6))
            for lo, hi in zip(cut[::2], cut[1::2]):
                g[lo:hi] = True
            g = g.reshape(shape[0], shape[2], shape[1]).transpose(0, 2, 1)
        else:
            g = rng.random(shape) < rng.uniform(0, 1)
        grids.append(g)
    exact = 0
    for i, g in enumerate(grids):
        blob = _oracle_file(g, *(("0.5 -1 2.25", "3.5") if i % 4 == 1 else ()))
        path = tmp_path / f"f{i}.binvox"
        path.write_bytes(blob)
        back, header = read_binvox(path.read_bytes(), with_header=True)
        exact += np.array_equal(back, g) and write_binvox(back, header) == blob

    corrupt = [
        b"#binvox 2\ndim 2 2 2\ndata\n\x01\x08",
        b"#binvx 1\ndim 2 2 2\ndata\n\x01\x08",
        b"#binvox 1\ndim 2 2\ndata\n\x01\x08",
        b"#binvox 1\ndim 2 -2 2\ndata\n\x01\x08",
        b"#binvox 1\ndim 2 2 2\ntranslate 0 0 0\n\x01\x08",
        b"#binvox 1\ndim 2 2 2\ndata\n\x01\x07",
        b"",
    ]
    codes = []
    for i, blob in enumerate(corrupt):
        src = tmp_path / f"bad{i}.binvox"
        src.write_bytes(blob)
        codes.append(main(["convert", "--in", str(src), "--out", str(tmp_path / f"bad{i}.ogn")]))
        with pytest.raises(ParseError):
            read_binvox(blob)
    secs = time.perf_counter() - t
    ok = exact == 300 and codes == [3] * len(corrupt) and secs < 10
    _record(acceptance_log, 10, ok,
            f"byte-exact {exact}/300, corrupted headers exit codes {sorted(set(codes))} (3), {secs:.1f} s (< 10 s)")
