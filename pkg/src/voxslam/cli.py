"""Command line entry points: generate, run, eval, mesh.

Exit codes: 0 success, 2 bad input (scene spec, config, missing files),
3 unrecoverable pipeline error (partial trajectory still flushed),
4 mesh extraction on an empty map.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import meshing, metrics, synth
from .config import RunConfig, load_config, validate
from .dataset import RGBDDataset, read_trajectory
from .errors import EmptyMap, VoxslamError
from .pipeline import RunSummary, SlamPipeline, load_run_submaps, write_run_outputs

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_PIPELINE = 3
EXIT_EMPTY_MAP = 4


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


# ----------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    try:
        spec = synth.SceneSpec.load(args.scene)
    except FileNotFoundError:
        return _fail(EXIT_BAD_INPUT, f"{args.scene}: no such file")
    except json.JSONDecodeError as e:
        return _fail(EXIT_BAD_INPUT, f"{args.scene}:{e.lineno}: {e.msg}")
    except (VoxslamError, KeyError, TypeError, ValueError) as e:
        return _fail(EXIT_BAD_INPUT, f"{args.scene}: {e}")
    try:
        synth.generate_sequence(spec, args.out, seed=args.seed)
    except VoxslamError as e:
        return _fail(EXIT_BAD_INPUT, str(e))
    print(f"wrote {spec.n_frames} frames to {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------------
# run


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    if args.no_loop:
        cfg.loop_enabled = False
    if args.max_frames is not None:
        cfg.max_frames = args.max_frames
    if args.snapshot_every is not None:
        cfg.snapshot_every = args.snapshot_every
    validate(cfg)
    return cfg


def _first_pose(dataset: RGBDDataset):
    """Ground-truth pose of the first frame when available.

    Anchors the run's world frame to the reference frame so maps and
    meshes can be compared against the scene directly; rigid alignment
    in the ATE makes this choice irrelevant for trajectory error.
    """
    try:
        stamps, poses = dataset.groundtruth()
    except VoxslamError:
        return None
    if len(poses) == 0:
        return None
    first = dataset.timestamps[0]
    return poses[int(np.argmin(np.abs(stamps - first)))]


def cmd_run(args) -> int:
    try:
        dataset = RGBDDataset(args.dataset)
        cfg = _load_run_config(args)
    except VoxslamError as e:
        return _fail(EXIT_BAD_INPUT, str(e))

    os.makedirs(args.out, exist_ok=True)
    pipe = SlamPipeline(dataset.intrinsics, cfg, first_pose=_first_pose(dataset))
    if cfg.snapshot_every > 0:
        snap_dir = os.path.join(args.out, "snapshots")
        os.makedirs(snap_dir, exist_ok=True)
        counter = {"n": 0}

        def hook(submap):
            path = os.path.join(
                snap_dir, f"submap_{submap.id:03d}_{counter['n']:04d}.vxm")
            submap.save(path)
            counter["n"] += 1

        pipe.snapshot_hook = hook

    t0 = time.time()
    failure = None
    try:
        if cfg.deterministic:
            summary = pipe.run(dataset.frames(), max_frames=cfg.max_frames)
        else:
            summary = pipe.run_threaded(dataset.frames(), max_frames=cfg.max_frames)
    except VoxslamError as e:
        failure = str(e)
        summary = RunSummary(pipe.records, pipe.loop_events, pipe.submaps,
                             time.time() - t0)
    except KeyboardInterrupt:
        failure = "interrupted"
        summary = RunSummary(pipe.records, pipe.loop_events, pipe.submaps,
                             time.time() - t0)

    write_run_outputs(args.out, summary, cfg, index=pipe.index)
    n_kf = sum(1 for r in summary.records if r.keyframe)
    print(f"frames {len(summary.records)}  keyframes {n_kf}  "
          f"submaps {len(summary.submaps)}  "
          f"loops {sum(1 for e in summary.loop_events if e['accepted'])}"
          f"/{len(summary.loop_events)}  "
          f"elapsed {summary.elapsed:.1f}s")
    if failure is not None:
        return _fail(EXIT_PIPELINE,
                     f"{failure} (partial results in {args.out})")
    return EXIT_OK


# ----------------------------------------------------------------------
# mesh


def _merge_run_mesh(run_dir, samples_per_voxel_axis: int) -> meshing.Mesh:
    """World-frame surface of every sub-map of a run, merged."""
    submaps = load_run_submaps(run_dir)
    if not submaps:
        raise EmptyMap(f"{run_dir}: no sub-map containers found")
    parts = []
    for sm in submaps:
        if sm.grid.n_voxels == 0:
            continue
        parts.append(meshing.extract_mesh(
            sm.grid, sm.decoder,
            samples_per_voxel_axis=samples_per_voxel_axis,
            transform=sm.pose_world))
    if not parts:
        raise EmptyMap(f"{run_dir}: every sub-map is empty")
    mesh = meshing.merge_meshes(parts)
    if mesh.n_faces == 0:
        raise EmptyMap(f"{run_dir}: extracted surface has no faces")
    return mesh


def _run_samples_per_axis(run_dir, override) -> int:
    if override is not None:
        return override
    cfg_path = os.path.join(run_dir, "config.txt")
    if os.path.isfile(cfg_path):
        return load_config(cfg_path).samples_per_voxel_axis
    return RunConfig().samples_per_voxel_axis


def cmd_mesh(args) -> int:
    try:
        spv = _run_samples_per_axis(args.run, args.samples_per_voxel_axis)
        mesh = _merge_run_mesh(args.run, spv)
    except EmptyMap as e:
        return _fail(EXIT_EMPTY_MAP, str(e))
    except VoxslamError as e:
        return _fail(EXIT_BAD_INPUT, str(e))
    meshing.write_ply(args.out, mesh)
    print(f"wrote {mesh.n_vertices} vertices / {mesh.n_faces} faces to {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------------
# eval


def _eval_rows(args) -> list:
    rows = []
    traj_path = os.path.join(args.run, "trajectory.txt")
    est_stamps, est_poses = read_trajectory(traj_path)

    gt_path = os.path.join(args.dataset, "groundtruth.txt")
    gt = None
    if os.path.isfile(gt_path):
        gt = read_trajectory(gt_path)
        ate = metrics.absolute_trajectory_error(
            est_stamps, est_poses, gt[0], gt[1])
        rows += [("ate.rmse", ate.rmse, "m"),
                 ("ate.mean", ate.mean, "m"),
                 ("ate.median", ate.median, "m"),
                 ("ate.pairs", ate.n_pairs, "count")]
    else:
        _warn(f"{gt_path}: missing, trajectory error skipped")

    try:
        spv = _run_samples_per_axis(args.run, None)
        recon = _merge_run_mesh(args.run, spv)
    except (EmptyMap, VoxslamError) as e:
        _warn(f"{e}; surface metrics skipped")
        return rows
    rows += [("mesh.vertices", recon.n_vertices, "count"),
             ("mesh.faces", recon.n_faces, "count")]

    scene_path = os.path.join(args.dataset, "scene.json")
    rng = np.random.default_rng(args.seed)
    recon_pts = metrics.sample_mesh_points(recon, args.samples, rng)
    if os.path.isfile(scene_path):
        spec = synth.SceneSpec.load(scene_path)
        # accuracy against the true surface: distance of reconstructed
        # points to the analytic zero level set
        acc = np.abs(synth.scene_sdf(spec, recon_pts))
        rows += [("mesh.accuracy", float(acc.mean()), "m"),
                 ("mesh.accuracy_p95", float(np.quantile(acc, 0.95)), "m")]
    else:
        _warn(f"{scene_path}: missing, surface accuracy skipped")

    if gt is not None:
        dataset = RGBDDataset(args.dataset)
        depths = [dataset[i].depth for i in range(len(dataset))]
        observed = metrics.observed_surface_points(
            depths, gt[1], dataset.intrinsics, stride=4)
        comp = metrics.point_set_metrics(recon_pts, observed,
                                         threshold=args.threshold)
        rows += [("mesh.completion", comp["completion"], "m"),
                 ("mesh.completion_ratio", comp["completion_ratio"], "ratio")]
    return rows


def cmd_eval(args) -> int:
    try:
        rows = _eval_rows(args)
    except VoxslamError as e:
        return _fail(EXIT_BAD_INPUT, str(e))
    except FileNotFoundError as e:
        return _fail(EXIT_BAD_INPUT, str(e))

    out_path = args.out or os.path.join(args.run, "metrics.csv")
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value", "unit"])
        for name, value, unit in rows:
            writer.writerow([name, f"{value:.9g}", unit])
    for name, value, unit in rows:
        print(f"{name} = {value:.6g} {unit}")
    print(f"wrote {out_path}")
    return EXIT_OK


# ----------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxslam",
        description="Dense RGB-D tracking and mapping on a sparse voxel SDF map",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic RGB-D dataset")
    p.add_argument("scene", help="scene description (json)")
    p.add_argument("out", help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="track and map an RGB-D dataset")
    p.add_argument("dataset", help="dataset directory")
    p.add_argument("out", help="run output directory")
    p.add_argument("--config", help="config file (key = value lines)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true",
                   help="force the synchronous single-threaded schedule")
    p.add_argument("--no-loop", action="store_true",
                   help="disable loop detection and optimization")
    p.add_argument("--max-frames", type=int, default=None)
    p.add_argument("--snapshot-every", type=int, default=None,
                   help="save a map snapshot every N keyframes")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a run against its dataset")
    p.add_argument("run", help="run output directory")
    p.add_argument("dataset", help="dataset directory")
    p.add_argument("-o", "--out", default=None,
                   help="metrics csv path (default: <run>/metrics.csv)")
    p.add_argument("--samples", type=int, default=100_000,
                   help="surface sample count for mesh metrics")
    p.add_argument("--threshold", type=float, default=0.05,
                   help="completion distance threshold in meters")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mesh", help="extract a surface mesh from a run")
    p.add_argument("run", help="run output directory")
    p.add_argument("out", help="output ply path")
    p.add_argument("--samples-per-voxel-axis", type=int, default=None)
    p.set_defaults(func=cmd_mesh)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
