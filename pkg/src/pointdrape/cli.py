"""Command line front end for the whole pipeline.

Subcommands cover dataset generation, training, fitting a new garment to a
single scan, animating, evaluation, the piecewise-rigid baseline, and the
finite-difference audit of the autodiff engine. Every command exits 0 on
success and nonzero with a message on standard error otherwise.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from types import SimpleNamespace

import numpy as np

from .body.skeleton import read_pose, read_skeleton
from .body.surface import PosedBody, rigid_repose
from .engine.archive import read_archive, write_archive
from .engine.gradcheck import run_all
from .formats import FormatError, read_ply, write_ply
from .losses import summarize, write_report
from .net import PRESETS, DrapeModel, ModelConfig, load_model
from .synth import generate_dataset
from .training import (FitConfig, TrainConfig, Dataset, animate, evaluate,
                       fit_unseen, normalize_points, normalize_pose, train)

GARMENT_PREFIX = "garment/"


def _cmd_gen_data(args):
    preset = PRESETS[args.preset]
    gt = args.gt_samples if args.gt_samples else preset["train"]["gt_samples"]
    m = preset["model"]
    skeleton = read_skeleton(args.skeleton) if args.skeleton else None
    manifest = generate_dataset(
        args.out, map_h=m["map_h"], map_w=m["map_w"], gt_samples=gt,
        seed=args.seed, n_traj=args.trajectories, skeleton=skeleton)
    splits = [ex[3] for ex in manifest.examples]
    print(f"wrote {len(manifest.examples)} examples "
          f"({splits.count('train')} train, {splits.count('test')} test) "
          f"for outfits {', '.join(manifest.outfits)} under {args.out}")
    return 0


def _open_log(path):
    if not path:
        return None, lambda line: print(line)
    fh = open(path, "w", encoding="ascii")

    def log(line):
        print(line)
        fh.write(line + "\n")
        fh.flush()
    return fh, log


def _cmd_train(args):
    if args.config:
        cfg = TrainConfig.from_file(args.preset, args.config)
    else:
        cfg = TrainConfig.from_preset(args.preset)
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, epochs=args.epochs).validate()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed).validate()
    dataset = Dataset(args.data)
    model = DrapeModel(ModelConfig.from_preset(args.preset), seed=cfg.seed)
    for name in dataset.train_outfits():
        model.add_garment(name)
    fh, log = _open_log(args.log)
    try:
        train(model, dataset, cfg, log=log, ckpt_path=args.out)
    finally:
        if fh:
            fh.close()
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_fit(args):
    model = load_model(args.model)
    skeleton = read_skeleton(args.skeleton)
    pose = read_pose(args.pose, skeleton)
    norm, r0, t0 = normalize_pose(skeleton, pose)
    body = PosedBody(skeleton, norm)
    scan, _ = read_ply(args.scan)
    if scan.shape[0] == 0:
        raise ValueError(f"{args.scan}: scan is empty")
    cfg = FitConfig.from_file(args.config) if args.config else FitConfig()
    if args.iters is not None:
        cfg = dataclasses.replace(cfg, iters=args.iters).validate()
    if args.lr is not None:
        cfg = dataclasses.replace(cfg, lr=args.lr).validate()
    g, history = fit_unseen(
        model, body, normalize_points(r0, t0, scan.astype(np.float64)),
        args.name, cfg, log=print)
    write_archive(args.out, {GARMENT_PREFIX + args.name: g.data})
    print(f"fitted garment {args.name!r} written to {args.out} "
          f"(loss {history[0]:.4e} -> {history[-1]:.4e})")
    return 0


def _load_garment(model, spec):
    """Resolve --garment: a name in the checkpoint or a fitted archive."""
    if spec in model.garments:
        return spec
    if not os.path.exists(spec):
        raise ValueError(
            f"garment {spec!r} is neither a known outfit "
            f"{sorted(model.garments)} nor an archive file")
    entries = read_archive(spec)
    names = [k for k in entries if k.startswith(GARMENT_PREFIX)]
    if len(names) != 1:
        raise FormatError(f"{spec}: expected one garment entry, found "
                          f"{sorted(entries)}")
    name = names[0][len(GARMENT_PREFIX):]
    arr = entries[names[0]]
    g = model.add_garment(name, init_std=0.0)
    if arr.shape != g.data.shape:
        raise ValueError(f"{spec}: garment shape {arr.shape} does not match "
                         f"model {g.data.shape}")
    g.data[...] = arr
    return name


def _cmd_animate(args):
    model = load_model(args.model)
    name = _load_garment(model, args.garment)
    skeleton = read_skeleton(args.skeleton)
    examples = []
    for path in args.poses:
        pose = read_pose(path, skeleton)
        norm, r0, t0 = normalize_pose(skeleton, pose)
        examples.append(SimpleNamespace(
            body=PosedBody(skeleton, norm), root_rot=r0, root_t=t0,
            stem=os.path.splitext(os.path.basename(path))[0]))
    os.makedirs(args.out, exist_ok=True)
    clouds = animate(model, name, examples, scale=args.scale)
    for ex, (pts, nrm) in zip(examples, clouds):
        out = os.path.join(args.out, f"{ex.stem}.ply")
        write_ply(out, pts.astype(np.float32), nrm.astype(np.float32))
        print(f"wrote {pts.shape[0]} points to {out}")
    return 0


def _cmd_eval(args):
    model = load_model(args.model)
    dataset = Dataset(args.data)
    records = evaluate(model, dataset, split=args.split, scale=args.scale)
    write_report(args.out, records)
    summary = summarize(records)
    for name, agg in summary.items():
        print(f"{name}: n={agg['count']}  "
              f"chamfer(m^2 x1e-4) {agg['chamfer_mean_x1e4']:.4f}  "
              f"normal(L1 x1e-1) {agg['normal_mean_x1e1']:.4f}")
    print(f"report written to {args.out}")
    return 0


def _cmd_repose(args):
    skeleton = read_skeleton(args.skeleton)
    src = PosedBody(skeleton, read_pose(args.src_pose, skeleton))
    dst = PosedBody(skeleton, read_pose(args.dst_pose, skeleton))
    pts, nrm = read_ply(args.scan)
    moved, spun = rigid_repose(src, dst, pts, args.map_size, args.map_size,
                               normals=nrm)
    write_ply(args.out, moved.astype(np.float32), spun.astype(np.float32))
    print(f"wrote {moved.shape[0]} reposed points to {args.out}")
    return 0


def _cmd_gradcheck(args):
    results = run_all(seed=args.seed, instances=args.instances)
    worst = 0.0
    for name, err in results.items():
        flag = "" if err <= args.tolerance else "  FAIL"
        print(f"{name:24s} max rel err {err:.3e}{flag}")
        worst = max(worst, err)
    if worst > args.tolerance:
        raise RuntimeError(
            f"gradient check failed: worst {worst:.3e} > {args.tolerance:g}")
    print(f"all {len(results)} ops within {args.tolerance:g}")
    return 0


def _build_parser():
    p = argparse.ArgumentParser(
        prog="pointdrape",
        description="dense point clouds of posed, clothed bodies")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--trajectories", type=int, default=24,
                   help="poses along the joint trajectory")
    g.add_argument("--gt-samples", type=int, default=0,
                   help="points per ground-truth cloud (0 = preset value)")
    g.add_argument("--skeleton", default=None,
                   help="skeleton file (default: built-in)")
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="train on a generated dataset")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    t.add_argument("--config", default=None, help="key = value overrides")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--log", default=None, help="also write progress here")
    t.set_defaults(fn=_cmd_train)

    f = sub.add_parser("fit", help="fit a garment code to one scan")
    f.add_argument("--model", required=True, help="trained checkpoint")
    f.add_argument("--scan", required=True, help="scan PLY (world frame)")
    f.add_argument("--pose", required=True, help="pose of the scan")
    f.add_argument("--skeleton", required=True)
    f.add_argument("--name", required=True, help="name for the new garment")
    f.add_argument("--out", required=True, help="fitted garment archive")
    f.add_argument("--config", default=None)
    f.add_argument("--iters", type=int, default=None)
    f.add_argument("--lr", type=float, default=None)
    f.set_defaults(fn=_cmd_fit)

    a = sub.add_parser("animate", help="decode a garment under new poses")
    a.add_argument("--model", required=True)
    a.add_argument("--garment", required=True,
                   help="outfit name or fitted archive")
    a.add_argument("--skeleton", required=True)
    a.add_argument("--out", required=True, help="output directory for PLYs")
    a.add_argument("--scale", type=int, default=None,
                   help="query grid densification override")
    a.add_argument("poses", nargs="+", help="pose files")
    a.set_defaults(fn=_cmd_animate)

    e = sub.add_parser("eval", help="report metrics on a dataset split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="report path")
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--scale", type=int, default=None)
    e.set_defaults(fn=_cmd_eval)

    r = sub.add_parser("repose-lbs",
                       help="piecewise-rigid baseline animation")
    r.add_argument("--scan", required=True)
    r.add_argument("--skeleton", required=True)
    r.add_argument("--src-pose", required=True, help="pose of the scan")
    r.add_argument("--dst-pose", required=True, help="target pose")
    r.add_argument("--out", required=True, help="output PLY")
    r.add_argument("--map-size", type=int, default=32,
                   help="texel grid used to assign points to segments")
    r.set_defaults(fn=_cmd_repose)

    c = sub.add_parser("gradcheck",
                       help="finite-difference audit of every op")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--instances", type=int, default=10)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.set_defaults(fn=_cmd_gradcheck)
    return p


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (FormatError, ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
