"""Command-line front end: synth -> recon -> mesh -> eval.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command honors --seed and records a manifest.json sufficient to
reproduce the run (resolved config, seed, inputs, outputs, timing, stats).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np
import yaml

from . import __version__
from .grid import ConfigurationError, GridConfig, init_grid, load_grid, save_grid, stats
from .mesh import (TriangleMesh, default_extraction_res, export_mesh, load_mesh,
                   marching_cubes, metrics, sample_volume, SdfVolume)
from .render import Camera
from .scene_io import (DatasetError, estimate_bbox, load_dataset, load_scene_file,
                       make_orbit_poses, render_synthetic, save_dataset, analytic_sdf)
from .train import TrainConfig, Trainer, TrainingDiverged

USAGE_ERROR, DATA_ERROR, NUMERICAL_ERROR = 1, 2, 3


def _write_manifest(path, payload: dict):
    payload = dict(payload)
    payload["dynagrid_version"] = __version__
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, default=str)
        f.write("\n")


def _tee(log_path):
    f = open(log_path, "a")

    def log(msg):
        print(msg)
        f.write(msg + "\n")
        f.flush()

    return log, f


# -- synth ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    scene, camera, traj = load_scene_file(args.scene)
    if args.poses is not None:
        traj["poses"] = args.poses
    t0 = time.time()
    poses = make_orbit_poses(traj["poses"], traj["radius"], traj["target"],
                             traj["elev_min_deg"], traj["elev_max_deg"], traj["revolutions"])
    frames = render_synthetic(scene, camera, poses)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(frames, camera, args.out)
    # ground-truth mesh from the analytic SDF at high resolution
    lo, hi = scene.bounds(pad=0.1)
    res = args.gt_res
    axes = [np.linspace(lo[a], hi[a], res + 1) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    vals = analytic_sdf(scene, np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1))
    vol = SdfVolume(values=vals.reshape(res + 1, res + 1, res + 1), origin=lo,
                    spacing=(hi - lo) / res)
    gt = marching_cubes(vol)
    gt_path = os.path.join(args.out, "gt_mesh.ply")
    export_mesh(gt, gt_path)
    _write_manifest(os.path.join(args.out, "manifest.json"), {
        "command": "synth",
        "seed": args.seed,
        "scene_file": os.path.abspath(args.scene),
        "out": os.path.abspath(args.out),
        "frames": len(frames),
        "camera": vars(camera),
        "trajectory": traj,
        "gt_mesh": gt_path,
        "gt_vertices": len(gt.vertices),
        "gt_triangles": len(gt.triangles),
        "elapsed_s": time.time() - t0,
    })
    print(f"synth: wrote {len(frames)} frames and gt mesh ({len(gt.triangles)} tris) to {args.out}")
    return 0


# -- recon ---------------------------------------------------------------------


def _load_run_config(path):
    if path is None:
        return {}
    with open(path) as f:
        doc = yaml.safe_load(f) or {}
    if not isinstance(doc, dict):
        raise DatasetError(f"{path}: config must be a mapping")
    unknown = set(doc) - {"train", "grid", "bbox"}
    if unknown:
        raise DatasetError(f"{path}: unknown config sections {sorted(unknown)}")
    return doc


def cmd_recon(args) -> int:
    doc = _load_run_config(args.config)
    train_kw = dict(doc.get("train", {}))
    if args.seed is not None:
        train_kw["seed"] = args.seed
    if args.iters is not None:
        train_kw["iters"] = args.iters
    if args.threads is not None:
        train_kw["threads"] = args.threads
    cfg = TrainConfig.from_dict(train_kw)

    frames, camera = load_dataset(args.dataset)
    grid_kw = doc.get("grid", {})
    bbox_kw = doc.get("bbox", {})
    lo, hi = estimate_bbox(frames, camera, truncation=cfg.truncation,
                           stride=int(bbox_kw.get("stride", 4)),
                           percentiles=tuple(bbox_kw.get("percentiles", (0.0, 100.0))))
    gcfg = GridConfig(
        bbox_min=lo, bbox_max=hi,
        base_res=tuple(grid_kw.get("base_res", (256, 256, 256))),
        max_levels=int(grid_kw.get("max_levels", 4)),
    )
    grid = init_grid(gcfg)

    os.makedirs(args.out, exist_ok=True)
    log, log_file = _tee(os.path.join(args.out, "train_log.txt"))
    log(f"recon: {len(frames)} frames, bbox {np.round(lo, 3).tolist()}..{np.round(hi, 3).tolist()}, "
        f"base_res {gcfg.base_res}, max_levels {gcfg.max_levels}, iters {cfg.iters}")
    t0 = time.time()
    trainer = Trainer(grid, frames, camera, cfg, out_dir=args.out)
    try:
        history = trainer.run(log_fn=log)
    finally:
        log_file.close()
    snap = os.path.join(args.out, "grid_final.dvgrid")
    save_grid(grid, snap)
    history.write_csv(os.path.join(args.out, "train_history.csv"))
    st = stats(grid)
    _write_manifest(os.path.join(args.out, "manifest.json"), {
        "command": "recon",
        "seed": cfg.seed,
        "dataset": os.path.abspath(args.dataset),
        "out": os.path.abspath(args.out),
        "config": {"train": cfg.to_dict(),
                   "grid": {"base_res": list(gcfg.base_res), "max_levels": gcfg.max_levels},
                   "bbox": {"stride": int(bbox_kw.get("stride", 4)),
                            "percentiles": list(bbox_kw.get("percentiles", (0.0, 100.0))),
                            "estimated_min": lo.tolist(), "estimated_max": hi.tolist()}},
        "snapshot": snap,
        "final_loss": history.loss_total[-1] if history.loss_total else None,
        "final_b": trainer.b,
        "active_voxels_per_level": st.active_per_level,
        "node_count": st.node_count,
        "subdivision_events": [vars(e) for e in history.events],
        "elapsed_s": time.time() - t0,
    })
    print(f"recon: finished in {time.time() - t0:.1f}s, snapshot at {snap}")
    return 0


# -- mesh ----------------------------------------------------------------------


def cmd_mesh(args) -> int:
    grid = load_grid(args.snapshot)
    res = args.res if args.res is not None else None
    t0 = time.time()
    vol = sample_volume(grid, resolution=(res, res, res) if res else None)
    mesh = marching_cubes(vol, iso=args.iso)
    if mesh.is_empty:
        print("warning: no zero crossing in the sampled volume; writing empty mesh(es)",
              file=sys.stderr)
    for out in args.out:
        export_mesh(mesh, out)
    _write_manifest(args.out[0] + ".manifest.json", {
        "command": "mesh",
        "seed": args.seed,
        "snapshot": os.path.abspath(args.snapshot),
        "out": [os.path.abspath(o) for o in args.out],
        "resolution": list(vol.values.shape),
        "iso": args.iso,
        "vertices": len(mesh.vertices),
        "triangles": len(mesh.triangles),
        "elapsed_s": time.time() - t0,
    })
    print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles "
          f"-> {', '.join(args.out)}")
    return 0


# -- eval ----------------------------------------------------------------------

REPORT_KEYS = ("chamfer_l1", "iou", "normal_consistency", "f_score", "pred_points", "gt_points")


def cmd_eval(args) -> int:
    pred = load_mesh(args.pred)
    gt = load_mesh(args.gt)
    m = metrics(pred, gt, f_threshold=args.f_threshold, iou_cell=args.iou_cell, seed=args.seed)
    lines = [f"{k} {m.to_dict()[k]:.6g}" for k in REPORT_KEYS]
    report = "\n".join(lines) + "\n"
    print(report, end="")
    if args.report:
        with open(args.report, "w") as f:
            f.write(report)
        _write_manifest(args.report + ".manifest.json", {
            "command": "eval",
            "seed": args.seed,
            "pred": os.path.abspath(args.pred),
            "gt": os.path.abspath(args.gt),
            "metrics": m.to_dict(),
        })
    return 0


# -- entry ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynagrid",
                                description="Dynamic voxel grid RGB-D surface reconstruction")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="render a synthetic RGB-D dataset from a scene file")
    ps.add_argument("scene", help="YAML scene description")
    ps.add_argument("out", help="output dataset directory")
    ps.add_argument("--poses", type=int, default=None, help="override trajectory pose count")
    ps.add_argument("--gt-res", type=int, default=256, help="ground-truth mesh lattice cells")
    ps.add_argument("--seed", type=int, default=0)
    ps.set_defaults(fn=cmd_synth)

    pr = sub.add_parser("recon", help="reconstruct a grid from a dataset")
    pr.add_argument("dataset", help="dataset directory (see synth)")
    pr.add_argument("out", help="output directory")
    pr.add_argument("--config", default=None, help="YAML run config (train/grid/bbox sections)")
    pr.add_argument("--seed", type=int, default=None, help="override train.seed")
    pr.add_argument("--iters", type=int, default=None, help="override train.iters")
    pr.add_argument("--threads", type=int, default=None, help="1 = deterministic single-thread")
    pr.set_defaults(fn=cmd_recon)

    pm = sub.add_parser("mesh", help="extract a triangle mesh from a grid snapshot")
    pm.add_argument("snapshot", help="grid snapshot (.dvgrid)")
    pm.add_argument("out", nargs="+", help="output mesh path(s); .ply and/or .obj")
    pm.add_argument("--res", type=int, default=None,
                    help="lattice cells per axis (default: finest effective resolution)")
    pm.add_argument("--iso", type=float, default=0.0)
    pm.add_argument("--seed", type=int, default=0)
    pm.set_defaults(fn=cmd_mesh)

    pe = sub.add_parser("eval", help="compare a predicted mesh against ground truth")
    pe.add_argument("pred")
    pe.add_argument("gt")
    pe.add_argument("--report", default=None, help="write the key-value report here")
    pe.add_argument("--f-threshold", type=float, default=0.05, help="F-score distance (m)")
    pe.add_argument("--iou-cell", type=float, default=0.05, help="IoU voxel size (m)")
    pe.add_argument("--seed", type=int, default=0)
    pe.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else USAGE_ERROR
    try:
        return args.fn(args)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return NUMERICAL_ERROR
    except (DatasetError, ConfigurationError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
