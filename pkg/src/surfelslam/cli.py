"""Command-line entry point: ``surfelslam {run,synth,render,eval}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .dataset import open_dataset, read_groundtruth, read_intrinsics, subsample
from .export import load_map_ply, render_views
from .metrics import metric_ate, metric_depth_rmse, metric_psnr, metric_ssim, serializable
from .pipeline import PRESETS, SlamConfig, is_heldout, run_slam
from .rasterizer import render
from .synth import DEFAULT_INTRINSICS, SCENES, synth_generate


class CliError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="surfelslam", description="RGB-D SLAM with 2D Gaussian surfels")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run SLAM on a dataset directory")
    r.add_argument("dataset", type=Path)
    r.add_argument("--preset", choices=sorted(PRESETS), default="base")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--max-frames", type=int, default=None)
    r.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, e.g. mapping.iters=20 (repeatable)")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--scene", choices=sorted(SCENES), default="sphere")
    s.add_argument("--frames", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)

    v = sub.add_parser("render", help="render colour, depth and normal images of a map")
    v.add_argument("--map", type=Path, required=True)
    v.add_argument("--trajectory", type=Path, required=True)
    v.add_argument("--intrinsics", type=Path, required=True)
    v.add_argument("--divisor", type=int, default=1)
    v.add_argument("--depth-range", type=float, nargs=2, default=None, metavar=("NEAR", "FAR"))
    v.add_argument("--out", type=Path, required=True)

    e = sub.add_parser("eval", help="score a map and trajectory against a dataset")
    e.add_argument("dataset", type=Path)
    e.add_argument("--map", type=Path, required=True)
    e.add_argument("--trajectory", type=Path, required=True)
    e.add_argument("--divisor", type=int, default=1)
    e.add_argument("--all-frames", action="store_true", help="score every frame instead of the held-out split")
    e.add_argument("--out", type=Path, default=None, help="write metrics JSON here")
    return p


def cmd_run(args) -> dict:
    cfg = SlamConfig.from_preset(args.preset, args.overrides, seed=args.seed)
    if args.max_frames is not None:
        cfg.max_frames = args.max_frames
    result = run_slam(open_dataset(args.dataset), cfg, out_dir=args.out)
    return {"out": str(args.out), "runtime_s": round(result.runtime_s, 2), **result.metrics}


def cmd_synth(args) -> dict:
    root = synth_generate(args.scene, args.out, args.frames, DEFAULT_INTRINSICS, args.seed)
    return {"out": str(root), "frames": args.frames, "scene": args.scene}


def cmd_render(args) -> dict:
    gmap = load_map_ply(args.map)
    poses = read_groundtruth(args.trajectory)
    intr = read_intrinsics(args.intrinsics).scaled(args.divisor)
    idx = sorted(poses)
    files = render_views(gmap, [poses[i] for i in idx], intr, args.out,
                         depth_range=tuple(args.depth_range) if args.depth_range else None, indices=idx)
    return {"out": str(args.out), "images": len(files)}


def cmd_eval(args) -> dict:
    ds = open_dataset(args.dataset)
    gmap = load_map_ply(args.map)
    est = read_groundtruth(args.trajectory)
    cfg = SlamConfig()
    frames = [i for i in range(len(ds)) if args.all_frames or is_heldout(i, cfg)]
    rows, d_r, d_g, d_m = [], [], [], []
    for i in frames:
        f = subsample(ds[i], args.divisor)
        if f.index not in est:
            raise CliError(f"trajectory has no pose for frame {f.index}")
        out = render(gmap, f.intrinsics, est[f.index])
        rows.append((f.index, metric_psnr(np.clip(out.color, 0, 1), f.color), metric_ssim(out.color, f.color)))
        d_r.append(out.depth)
        d_g.append(f.depth)
        d_m.append(f.valid_depth)
    metrics: dict = {}
    both = sorted(set(est) & set(ds.gt_poses))
    metrics["ate_mm"] = metric_ate([est[i] for i in both], [ds.gt_poses[i] for i in both]) if len(both) >= 2 else None
    if rows:
        metrics["psnr"] = serializable(float(np.mean([r[1] for r in rows])))
        metrics["ssim"] = float(np.mean([r[2] for r in rows]))
        metrics["depth_rmse_mm"] = metric_depth_rmse(d_r, d_g, d_m)
    else:
        metrics.update(psnr=None, ssim=None, depth_rmse_mm=None)
    print(f"{'frame':>6} {'psnr':>8} {'ssim':>7}", file=sys.stderr)
    for idx, p, s in rows:
        print(f"{idx:>6} {serializable(p):>8.2f} {s:>7.4f}", file=sys.stderr)
    if args.out is not None:
        args.out.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return metrics


COMMANDS = {"run": cmd_run, "synth": cmd_synth, "render": cmd_render, "eval": cmd_eval}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        summary = COMMANDS[args.command](args)
    except (CliError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(json.dumps({"error": type(exc).__name__, "message": msg}), file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0
