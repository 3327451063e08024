"""Command-line entry point: ``ogn <command> [flags]``.

Exit codes: 0 success, 1 internal error, 2 I/O error, 3 parse error,
4 configuration error, 5 failed check (gradcheck or eval threshold).
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_INTERNAL, EXIT_IO, EXIT_PARSE, EXIT_CONFIG, EXIT_CHECK = range(6)

log = logging.getLogger("ogn")


class CheckFailed(Exception):
    pass


def _threads(default):
    n = os.environ.get("OGN_THREADS")
    n = str(default) if not n else n
    if n != "0":
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _triple(text):
    v = _ints(text)
    if len(v) == 1:
        v = v * 3
    if len(v) != 3:
        raise argparse.ArgumentTypeError("expected d or d1,d2,d3")
    return tuple(v)


def build_parser():
    p = argparse.ArgumentParser(prog="ogn", description="Octree generating networks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("convert", help="binvox <-> octree conversion by file extension")
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--fill-interior", action="store_true")
    c.add_argument("--base-res", type=_triple, default=(1, 1, 1))

    s = sub.add_parser("synth", help="write the toy corpus or toy scenes as binvox files plus a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=("corpus", "scenes"), default="corpus")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--resolutions", type=_ints, default=[32])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--images", type=int, default=0, help="also render grayscale views of this size")

    t = sub.add_parser("train", help="train an OGN or dense network")
    t.add_argument("--config", required=True, help="preset name or JSON file")
    t.add_argument("--data", required=True, help="dataset manifest")
    t.add_argument("--regime", choices=("known", "known+pred", "pred"))
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--kind", choices=("ogn", "dense"), default="ogn")
    t.add_argument("--steps", type=int, help="main-phase steps (lr drops rescaled to 30%%/70%%)")
    t.add_argument("--finetune-steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--checkpoint-every", type=int)

    i = sub.add_parser("infer", help="predict an octree")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True, help="sample id, one-hot index, .pgm image or .binvox grid")
    i.add_argument("--data", help="manifest used to resolve sample ids")
    i.add_argument("--out", required=True)
    i.add_argument("--mode", choices=("pred", "known"), default="pred")

    e = sub.add_parser("eval", help="IoU of predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--gt-res", type=int, required=True)
    e.add_argument("--out")
    e.add_argument("--min-iou", type=float)

    b = sub.add_parser("bench", help="slim-network scaling benchmark")
    b.add_argument("--shapes", default="sphere")
    b.add_argument("--resolutions", type=_ints, default=[32, 64, 128, 256])
    b.add_argument("--out", required=True)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--preset", default="slim-appendixA")

    x = sub.add_parser("shift-exp", help="IoU under z-shifted inputs")
    x.add_argument("--checkpoints", nargs="+", required=True, help="OGN and/or dense checkpoints")
    x.add_argument("--shifts", type=_ints, default=[0, 1, 2, 4, 8])
    x.add_argument("--data", help="manifest; test split is used (default: toy corpus test split)")
    x.add_argument("--out", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of a configured network")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--entries", type=int, default=2, help="probed entries per parameter array")
    g.add_argument("--tol", type=float, default=1e-4)
    return p


# -- commands ------------------------------------------------------------------------


def cmd_convert(args):
    from .datasets import load_binvox, read_binvox, write_binvox
    from .octree import deserialize, from_voxel_grid, serialize, to_voxel_grid

    src, dst = Path(args.inp), Path(args.out)
    blob = src.read_bytes()
    if src.suffix == ".binvox":
        grid = read_binvox(blob)
    elif src.suffix == ".ogn":
        grid = to_voxel_grid(deserialize(blob))
    else:
        raise ValueError(f"unknown input extension {src.suffix!r} (expected .binvox or .ogn)")
    if args.fill_interior:
        from .datasets import fill_interior

        grid = fill_interior(grid)
    if dst.suffix == ".ogn":
        octree = from_voxel_grid(grid, args.base_res)
        dst.write_bytes(serialize(octree))
        log.info("wrote %d leaves to %s", len(octree), dst)
    elif dst.suffix == ".binvox":
        dst.write_bytes(write_binvox(grid))
    else:
        raise ValueError(f"unknown output extension {dst.suffix!r}")
    return EXIT_OK


def cmd_synth(args):
    from .datasets import (
        DatasetManifest,
        ManifestRecord,
        make_split,
        render_view,
        save_binvox,
        toy_corpus,
        toy_scene,
        write_image,
        write_manifest,
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for res in args.resolutions:
        if args.kind == "corpus":
            ids, grids = toy_corpus(args.n, res, args.seed)
        else:
            ids = [f"scene-{k}" for k in range(args.n)]
            grids = [toy_scene(k, res) for k in range(args.n)]
        for sid, g in zip(ids, grids):
            save_binvox(out / f"{sid}_{res}.binvox", g)
            if args.images and res == args.resolutions[-1]:
                write_image(out / f"{sid}.pgm", render_view(g, args.images))
        if not records:
            records = [
                ManifestRecord(sid, f"{sid}_{{res}}.binvox", f"{sid}.pgm" if args.images else None)
                for sid in ids
            ]
    if args.kind == "corpus":
        records = make_split(records, 0.8, args.seed)
    manifest = DatasetManifest(records, len(records), out)
    write_manifest(out / "manifest.txt", manifest)
    log.info("wrote %d samples at %s to %s", len(records), args.resolutions, out)
    return EXIT_OK


def _load_split(manifest, cfg, split):
    """Inputs and ground-truth grids for one split of a manifest."""
    import numpy as np

    from .datasets import load_binvox, one_hot, read_image

    res = cfg.output_resolution()[0]
    recs = manifest.split(split)
    grids = np.stack([load_binvox(manifest.voxel_path(r, res)) for r in recs]) if recs else None
    if not recs:
        return None, None, recs
    if cfg.input_kind == "voxels":
        in_res = cfg.input_shape[1]
        inputs = np.stack([load_binvox(manifest.voxel_path(r, in_res)) for r in recs])[:, None].astype(float)
    elif cfg.input_kind == "onehot":
        n = cfg.input_shape[0]
        inputs = np.stack([one_hot(manifest.index_of(r.id), n) for r in recs])
    else:
        inputs = np.stack([read_image(manifest.image_path(r)) for r in recs])
    return inputs, grids, recs


def cmd_train(args):
    from dataclasses import replace

    import numpy as np

    from .config import TrainSchedule, load_network_config, load_preset, load_schedule, scaled_drops
    from .datasets import load_manifest
    from .evaluation import evaluate, iou, report_write
    from .experiments import preset_schedule
    from .training import TrainingSet, train

    cfg = load_network_config(args.config)
    src = Path(args.config)
    if src.suffix == ".json" and src.exists():
        schedule = load_schedule(json.loads(src.read_text()).get("schedule", {}))
    else:
        schedule = preset_schedule(args.config) if "schedule" in load_preset(args.config) else TrainSchedule()
    over = {k: v for k, v in (("total_steps", args.steps), ("finetune_steps", args.finetune_steps),
                              ("batch_size", args.batch_size), ("checkpoint_every", args.checkpoint_every),
                              ("regime", args.regime)) if v is not None}
    if "total_steps" in over:
        over["lr_drops"] = scaled_drops(over["total_steps"])
    schedule = replace(schedule, **over)
    schedule.validate()
    log.info("resolved config: %s", json.dumps({"network": cfg.to_dict(), "schedule": schedule.to_dict(),
                                                 "seed": args.seed, "kind": args.kind}, sort_keys=True))
    manifest = load_manifest(args.data)
    inputs, grids, _ = _load_split(manifest, cfg, "train")
    if inputs is None:
        raise ValueError("manifest has no training samples")
    data = TrainingSet(inputs, grids, cfg.base_resolution())
    out = Path(args.out)
    result = train(cfg, data, schedule, args.seed, out, kind=args.kind)
    # evaluate on the test split, or on the training set when there is none
    split = "test" if manifest.split("test") else "train"
    t_in, t_grids, recs = _load_split(manifest, cfg, split)
    if result.net.kind == "ogn":
        scores = [evaluate(o, g) for o, g in zip(result.net.predict(t_in), t_grids)]
    else:
        scores = [iou(p, g) for p, g in zip(result.net.predict_grids(t_in), t_grids)]
    res = cfg.output_resolution()[0]
    report_write([{"sample_id": r.id, "resolution": res, "iou": float(s)} for r, s in zip(recs, scores)],
                 out / "eval.csv", "eval")
    summary = {"split": split, "mean_iou": float(np.mean(scores)), "steps": len(result.log),
               "final_loss": result.log[-1][1] if result.log else None}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"mean IoU ({split}): {summary['mean_iou']:.4f}")
    return EXIT_OK


def _infer_input(args, net):
    import numpy as np

    from .datasets import load_binvox, load_manifest, one_hot, read_image

    cfg = net.config
    path = Path(args.input)
    if path.suffix == ".pgm":
        return read_image(path)[None]
    if path.suffix == ".binvox":
        return load_binvox(path)[None, None].astype(float)
    if cfg.input_kind != "onehot":
        raise ValueError("sample ids only select inputs of one-hot networks")
    if args.data:
        index = load_manifest(args.data).index_of(args.input)
    else:
        try:
            index = int(args.input)
        except ValueError:
            raise ValueError(f"cannot resolve input {args.input!r} without --data") from None
    return one_hot(index, cfg.input_shape[0])[None]


def cmd_infer(args):
    from .datasets import save_binvox
    from .octree import serialize
    from .training import load_checkpoint

    net, _, _ = load_checkpoint(args.checkpoint)
    x = _infer_input(args, net)
    out = Path(args.out)
    if net.kind == "ogn":
        if args.mode == "known":
            raise ValueError("infer supports Prop-pred only; Prop-known needs a ground-truth octree")
        result = net.forward(x, "pred")
        octree = net.octree_from_sample(result.samples[0], "pred")
        if result.samples[0].finest_mixed:
            log.warning("%d finest-level cells predicted mixed were resolved as filled",
                        result.samples[0].finest_mixed)
        if out.suffix == ".binvox":
            from .octree import to_voxel_grid

            save_binvox(out, to_voxel_grid(octree))
        else:
            out.write_bytes(serialize(octree))
        log.info("predicted %d leaves", len(octree))
    else:
        grid = net.predict_grids(x)[0]
        if out.suffix == ".ogn":
            from .octree import from_voxel_grid

            out.write_bytes(serialize(from_voxel_grid(grid, (1, 1, 1))))
        else:
            save_binvox(out, grid)
    return EXIT_OK


def _grid_files(path):
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix in (".ogn", ".binvox"))
        return {p.stem: p for p in files}
    if not path.exists():
        raise FileNotFoundError(f"no such file or directory: {path}")
    return {path.stem: path}


def _load_grid(path):
    from .datasets import load_binvox
    from .octree import deserialize, to_voxel_grid

    path = Path(path)
    if path.suffix == ".ogn":
        return to_voxel_grid(deserialize(path.read_bytes()))
    return load_binvox(path)


def _match_gt(stem, gts, res):
    for key in (stem, f"{stem}_{res}", stem.rsplit("_", 1)[0] + f"_{res}"):
        if key in gts:
            return gts[key]
    return None


def cmd_eval(args):
    import numpy as np

    from .evaluation import evaluate, report_write

    preds, gts = _grid_files(args.pred), _grid_files(args.gt)
    if len(preds) == 1 and len(gts) == 1:
        pairs = [(next(iter(preds)), next(iter(preds.values())), next(iter(gts.values())))]
    else:
        pairs = []
        for stem, p in preds.items():
            g = _match_gt(stem, gts, args.gt_res)
            if g is None:
                raise FileNotFoundError(f"no ground truth for prediction {p.name}")
            pairs.append((stem, p, g))
    rows = []
    for stem, p, g in pairs:
        gt = _load_grid(g)
        if gt.shape != (args.gt_res,) * 3:
            raise ValueError(f"{g.name} has resolution {gt.shape}, expected {args.gt_res}")
        rows.append({"sample_id": stem, "resolution": args.gt_res, "iou": float(evaluate(_load_grid(p), gt))})
    if args.out:
        report_write(rows, args.out, "eval")
    mean = float(np.mean([r["iou"] for r in rows]))
    print(f"mean IoU: {mean:.4f} over {len(rows)} samples")
    if args.min_iou is not None and mean < args.min_iou:
        raise CheckFailed(f"mean IoU {mean:.4f} below threshold {args.min_iou}")
    return EXIT_OK


def cmd_bench(args):
    from .evaluation import fit_loglog_slope, report_write, scaling_benchmark

    rows = scaling_benchmark(args.shapes, args.resolutions, args.preset, args.repeats,
                             log=lambda r: log.info("%s", r))
    report_write(rows, args.out, "bench")
    for rep in ("octree", "dense"):
        slope = fit_loglog_slope(rows, "live_scalars", rep)
        t = fit_loglog_slope(rows, "seconds", rep)
        print(f"{rep}: live-scalar slope {slope:.3f}, time slope {t:.3f}")
    return EXIT_OK


def cmd_shift(args):
    from .datasets import load_manifest
    from .evaluation import report_write, shift_experiment
    from .experiments import toy_split
    from .training import load_checkpoint

    nets = {}
    for path in args.checkpoints:
        net, _, _ = load_checkpoint(path)
        nets[net.kind] = net
    any_net = next(iter(nets.values()))
    if args.data:
        _, grids, _ = _load_split(load_manifest(args.data), any_net.config, "test")
    else:
        grids = toy_split(resolution=any_net.config.input_shape[1]).test
    rows = shift_experiment(nets.get("ogn"), nets.get("dense"), grids, args.shifts)
    report_write(rows, args.out, "shift")
    for r in rows:
        print(f"shift {r.shift}: ogn {r.iou_ogn:.4f} dense {r.iou_dense:.4f}")
    return EXIT_OK


def cmd_gradcheck(args):
    import numpy as np

    from .config import load_network_config
    from .datasets import synth_toy_shape
    from .model import build_network
    from .nn import gradient_check
    from .octree import from_voxel_grid

    cfg = load_network_config(args.config)
    log.info("resolved config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    rng = np.random.default_rng(args.seed)
    res = cfg.output_resolution()[0]
    grid = synth_toy_shape("union", seed=args.seed, resolution=res)
    if cfg.input_kind == "voxels":
        x = synth_toy_shape("sphere", seed=args.seed, resolution=cfg.input_shape[1])[None, None].astype(float)
    elif cfg.input_kind == "onehot":
        x = np.eye(cfg.input_shape[0])[:1]
    else:
        x = rng.random((1,) + tuple(cfg.input_shape))
    worst = 0.0
    for kind in ("ogn", "dense"):
        net = build_network(cfg, args.seed, kind)
        # move biases off zero so that ReLU kinks are not hit at every probe
        for name, p in net.params.items():
            if name.endswith(".b"):
                p[...] = rng.uniform(0.02, 0.3, p.shape)
        if kind == "ogn":
            gt = [from_voxel_grid(grid, cfg.base_resolution())]
            _, grads, _ = net.loss_and_grads(x, gt, "known")
            fn = lambda: net.forward(x, "known", gt).loss  # noqa: E731
        else:
            _, grads, _ = net.loss_and_grads(x, grid[None])
            fn = lambda: net.forward(x, grid[None])["loss"]  # noqa: E731
        # a small step keeps probes of widely shared parameters off neighbouring kinks
        err, checked, skipped = gradient_check(fn, net.params, grads, 1e-6, args.entries, rng,
                                               skip_kinks=True, tol=args.tol)
        print(f"{kind}: max relative error {err:.3e} over {checked} entries ({skipped} at ReLU kinks skipped)")
        worst = max(worst, err)
    print(f"max relative error: {worst:.3e}")
    if worst > args.tol:
        raise CheckFailed(f"gradient check failed: {worst:.3e} > {args.tol}")
    return EXIT_OK


COMMANDS = {
    "convert": cmd_convert,
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "shift-exp": cmd_shift,
    "gradcheck": cmd_gradcheck,
}


def _exit_code(exc):
    from .config import ConfigError
    from .datasets import ParseError
    from .layers import ContractError
    from .octree import FormatError, ShapeError
    from .training import CheckpointError

    if isinstance(exc, CheckFailed):
        return EXIT_CHECK
    if isinstance(exc, (ParseError, FormatError, CheckpointError)):
        return EXIT_PARSE
    if isinstance(exc, (OSError, FileNotFoundError)):
        return EXIT_IO
    if isinstance(exc, (ConfigError, ContractError, ShapeError, ValueError, KeyError)):
        return EXIT_CONFIG
    return EXIT_INTERNAL


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    _threads(1 if args.command == "bench" else os.cpu_count() or 1)
    log.info("command: %s", json.dumps(vars(args), sort_keys=True, default=str))
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = _exit_code(exc)
        if code == EXIT_INTERNAL:
            log.exception("internal error")
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
