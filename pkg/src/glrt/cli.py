"""Command-line entry points.

    glrt synth  --spec scene.json --out captures/
    glrt train  --scene captures/ --config train.cfg --out run/
    glrt render --checkpoint run/ --frame 3 --out renders/
    glrt eval   --render renders/ --gt captures/ --report report.json
    glrt edit   --checkpoint run/ --script edits.json --out run_edited/
    glrt resim  --checkpoint run/ --beams 64 --out resim/

Every command takes --seed and --threads; --threads 1 gives bit-identical
outputs on machines with the same floating-point environment. Errors exit
nonzero after printing one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .formats import load_range_image, save_range_image, write_ply
from .geom import quat_slerp, quat_to_rotmat, rotmat_to_quat
from .lidar import LidarConfig, apply_raydrop, generate_rays, range_image_to_pointcloud
from .metrics import chamfer, evaluate_view, fscore
from .scenegraph import (
    assemble,
    assemble_at_time,
    insert_object,
    load_manifest,
    load_scenegraph,
    object_from_record,
    remove_object,
    save_scenegraph,
    set_trajectory,
)
from .synth import generate_dataset, load_scene_spec
from .tracer import TraceConfig, trace_forward
from .training import (
    DROP_THRESHOLD,
    TrainConfig,
    parse_train_config,
    result_to_range_image,
    train_scene,
)

log = logging.getLogger("glrt")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0, help="global RNG seed")
    p.add_argument("--threads", type=int, default=0, help="worker threads (0 = all cores)")


def _apply_common(args):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.threads > 0:
        import numba

        numba.set_num_threads(args.threads)


def _interp_sensor_pose(poses: np.ndarray, timestamps: np.ndarray, t: float) -> np.ndarray:
    if t <= timestamps[0]:
        return poses[0]
    if t >= timestamps[-1]:
        return poses[-1]
    hi = int(np.searchsorted(timestamps, t, side="right"))
    lo = hi - 1
    s = (t - timestamps[lo]) / (timestamps[hi] - timestamps[lo])
    out = np.eye(4)
    out[:3, 3] = (1 - s) * poses[lo, :3, 3] + s * poses[hi, :3, 3]
    q = quat_slerp(rotmat_to_quat(poses[lo, :3, :3]), rotmat_to_quat(poses[hi, :3, :3]), s)
    out[:3, :3] = quat_to_rotmat(q)
    return out


def _render_one(scene, lidar: LidarConfig, flat, frame_for_pose, out_dir: Path, stem: str):
    from .bvh import bvh_for_primitives

    tree = bvh_for_primitives(flat.means, flat.rots, flat.scales)
    origins, dirs = generate_rays(lidar, frame_for_pose)
    result = trace_forward(flat, tree, origins, dirs, TraceConfig(near=lidar.near))
    img = result_to_range_image(result, lidar)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_range_image(out_dir / f"{stem}.pfm", img)
    masked = apply_raydrop(img, DROP_THRESHOLD)
    pts, intens = range_image_to_pointcloud(masked, lidar, frame_for_pose, drop_threshold=None)
    write_ply(out_dir / f"{stem}.ply", pts, intens)
    return img


def cmd_synth(args):
    scene = load_scene_spec(args.spec)
    if args.seed:
        scene.seed = args.seed
    out = generate_dataset(scene, args.out)
    print(f"wrote {scene.n_frames} frames to {out}")


def cmd_train(args):
    cfg = parse_train_config(args.config) if args.config else TrainConfig()
    if args.seed:
        cfg.seed = args.seed
    if args.steps:
        cfg.steps = args.steps
    trainer = train_scene(args.scene, cfg, args.out)
    print(f"checkpoint saved to {args.out} ({trainer.step_count} steps)")


def _load_checkpoint(path):
    manifest = load_manifest(path)
    scene = load_scenegraph(manifest)
    return manifest, scene


def _override_lidar(lidar: LidarConfig, args) -> LidarConfig:
    d = lidar.to_dict()
    if getattr(args, "beams", None):
        d["beams"] = args.beams
        d.pop("elevations", None)
    if getattr(args, "steps", None):
        d["steps"] = args.steps
    if getattr(args, "fov_up_deg", None) is not None:
        d["fov_up"] = float(np.deg2rad(args.fov_up_deg))
    if getattr(args, "fov_down_deg", None) is not None:
        d["fov_down"] = float(np.deg2rad(args.fov_down_deg))
    if getattr(args, "near", None) is not None:
        d["near"] = args.near
    if getattr(args, "far", None) is not None:
        d["far"] = args.far
    return LidarConfig.from_dict(d)


def cmd_render(args):
    manifest, scene = _load_checkpoint(args.checkpoint)
    lidar = manifest.lidar_with_poses()
    lidar = _override_lidar(lidar, args)
    lidar.poses = manifest.sensor_poses()
    if args.time is not None:
        flat = assemble_at_time(scene, args.time)
        pose = _interp_sensor_pose(lidar.poses, manifest.timestamps, args.time)
        lidar.poses = pose[None]
        frame_for_pose = 0
        stem = f"time_{args.time:.3f}".replace(".", "_")
    else:
        flat = assemble(scene, args.frame)
        frame_for_pose = args.frame
        stem = f"frame_{args.frame:04d}"
    if args.pose_json:
        pose = np.asarray(json.loads(Path(args.pose_json).read_text()), dtype=np.float64)
        lidar.poses = pose.reshape(1, 4, 4)
        frame_for_pose = 0
    _render_one(scene, lidar, flat, frame_for_pose, Path(args.out), stem)
    print(f"rendered {stem} to {args.out}")


def cmd_resim(args):
    manifest, scene = _load_checkpoint(args.checkpoint)
    lidar = _override_lidar(manifest.lidar_with_poses(), args)
    lidar.poses = manifest.sensor_poses()
    frames = range(len(manifest.frames)) if args.frame is None else [args.frame]
    out = Path(args.out)
    for f in frames:
        flat = assemble(scene, f)
        _render_one(scene, lidar, flat, f, out / "frames", f"frame_{f:04d}")
    print(f"re-simulated {len(list(frames))} frame(s) at {lidar.beams}x{lidar.steps} to {out}")


def cmd_eval(args):
    render_dir = Path(args.render)
    gt_dir = Path(args.gt)
    renders = sorted(render_dir.rglob("frame_*.pfm"))
    if not renders:
        raise FileNotFoundError(f"no frame_*.pfm under {render_dir}")
    gt_manifest = None
    try:
        gt_manifest = load_manifest(gt_dir)
    except (FileNotFoundError, ValueError):
        pass
    depth_peak = gt_manifest.lidar.far if gt_manifest else 80.0
    per_frame = {}
    for rpath in renders:
        name = rpath.name
        matches = sorted(gt_dir.rglob(name))
        if not matches:
            raise FileNotFoundError(f"no ground-truth {name} under {gt_dir}")
        render_img = apply_raydrop(load_range_image(rpath), DROP_THRESHOLD)
        gt_img = load_range_image(matches[0])
        row = evaluate_view(render_img, gt_img, depth_peak)
        if gt_manifest is not None:
            frame = int(name.split("_")[1].split(".")[0])
            lidar = gt_manifest.lidar_with_poses()
            gt_pts, _ = range_image_to_pointcloud(gt_img, lidar, frame, drop_threshold=None)
            r_pts, _ = range_image_to_pointcloud(render_img, lidar, frame, drop_threshold=None)
            if len(gt_pts) and len(r_pts):
                row["chamfer"] = chamfer(r_pts, gt_pts)
                row["fscore"] = fscore(r_pts, gt_pts, tau=0.05)
        per_frame[name] = row
    keys = sorted({k for row in per_frame.values() for k in row})
    aggregate = {
        k: float(np.mean([row[k] for row in per_frame.values() if k in row])) for k in keys
    }
    report = {"frames": per_frame, "aggregate": aggregate, "count": len(per_frame)}
    Path(args.report).write_text(json.dumps(report, indent=1))
    summary = {
        k: aggregate[k]
        for k in ("depth_rmse_gt", "intensity_rmse_gt", "chamfer", "fscore")
        if k in aggregate
    }
    print(json.dumps(summary))


def cmd_edit(args):
    manifest, scene = _load_checkpoint(args.checkpoint)
    script = json.loads(Path(args.script).read_text())
    base = Path(args.script).parent
    for op in script:
        kind = op["op"]
        if kind == "remove":
            scene = remove_object(scene, op["id"])
        elif kind == "insert":
            scene = insert_object(scene, object_from_record(op["object"], base))
        elif kind == "retrajectory":
            track = op["track"]
            frames = sorted(int(k) for k in track)
            poses = np.stack([np.asarray(track[str(k)], dtype=np.float64) for k in frames])
            scene = set_trajectory(
                scene, op["id"], np.array(frames), poses[:, :3, :3], poses[:, :3, 3]
            )
        else:
            raise ValueError(f"unknown edit op {kind!r}")
    save_scenegraph(Path(args.out), scene, manifest.lidar_with_poses(), manifest.frames)
    print(f"edited checkpoint written to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glrt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="ray-cast an analytic scene into a capture directory")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    _add_common(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="fit a Gaussian scene to a capture directory")
    s.add_argument("--scene", required=True)
    s.add_argument("--config", default=None, help="key = value training config file")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=0, help="override config step count")
    _add_common(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render one view from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--time", type=float, default=None, help="interpolate poses at this timestamp")
    s.add_argument("--pose-json", default=None, help="JSON file with a 4x4 sensor pose override")
    s.add_argument("--beams", type=int, default=0)
    s.add_argument("--steps", type=int, default=0)
    s.add_argument("--fov-up-deg", type=float, default=None)
    s.add_argument("--fov-down-deg", type=float, default=None)
    s.add_argument("--near", type=float, default=None)
    s.add_argument("--far", type=float, default=None)
    s.add_argument("--out", required=True)
    _add_common(s)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("resim", help="re-simulate frames under a new sensor configuration")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--frame", type=int, default=None, help="single frame (default: all)")
    s.add_argument("--beams", type=int, default=0)
    s.add_argument("--steps", type=int, default=0)
    s.add_argument("--fov-up-deg", type=float, default=None)
    s.add_argument("--fov-down-deg", type=float, default=None)
    s.add_argument("--near", type=float, default=None)
    s.add_argument("--far", type=float, default=None)
    s.add_argument("--out", required=True)
    _add_common(s)
    s.set_defaults(func=cmd_resim)

    s = sub.add_parser("eval", help="score rendered frames against ground truth")
    s.add_argument("--render", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--report", required=True)
    _add_common(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("edit", help="apply a remove/insert/retrajectory script")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--script", required=True)
    s.add_argument("--out", required=True)
    _add_common(s)
    s.set_defaults(func=cmd_edit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_common(args)
    try:
        args.func(args)
    except Exception as e:  # noqa: BLE001 - single reporting point for the CLI
        print(json.dumps({"error": f"{type(e).__name__}: {e}"}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
