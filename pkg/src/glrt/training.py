"""End-to-end scene fitting from a capture directory.

The capture manifest provides per-frame sensor poses and ground-truth range
images. Points are lifted from the captures, split into background and
per-object sets by the tracked boxes, seeded as Gaussians, and optimized
with Adam against the composite loss. Object primitives live in their own
frame; the flat world-frame gradients from the tracer are routed back
through each frame's rigid pose.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import initialization as init
from .bvh import bvh_for_primitives
from .formats import load_range_image
from .gaussians import GaussianCloud
from .geom import invert_pose, transform_points
from .lidar import LidarConfig, RangeImage, generate_rays, range_image_to_pointcloud
from .metrics import rmse
from .optim import (
    Adam,
    AdamState,
    DensifyConfig,
    LossWeights,
    ParamGroup,
    densify_and_prune,
    remap_adam_state,
    render_loss_gradients,
    loss_cd,
)
from .scenegraph import (
    ObjectModel,
    SceneGraph,
    SceneManifest,
    assemble,
    load_manifest,
    route_gradients,
    save_scenegraph,
)
from .tracer import TraceConfig, trace_forward, trace_backward

log = logging.getLogger(__name__)

DROP_THRESHOLD = 0.5


@dataclass
class TrainConfig:
    steps: int = 3000
    sh_degree: int = 2
    voxel_size: float = 0.15
    pad_target: int = 8000
    knn: int = 16
    chunk_size: int = 16
    t_min: float = 1e-4
    near: float = 0.2
    cutoff: float = 3.0
    lr_means: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_quats: float = 1e-3
    lr_log_scales: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    w_depth: float = 0.1
    w_intensity: float = 0.1
    w_raydrop: float = 0.01
    w_chamfer: float = 0.01
    cd_interval: int = 1
    densify_start: int = 500
    densify_stop: int = 15000
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    densify_opacity_threshold: float = 0.005
    densify_split_scale: float = 0.05
    densify_max_primitives: int = 200000
    eval_interval: int = 250
    test_every: int = 10
    seed: int = 0

    def trace(self) -> TraceConfig:
        return TraceConfig(chunk_size=self.chunk_size, t_min=self.t_min, near=self.near)

    def weights(self) -> LossWeights:
        return LossWeights(self.w_depth, self.w_intensity, self.w_raydrop, self.w_chamfer)

    def densify(self) -> DensifyConfig:
        return DensifyConfig(
            grad_threshold=self.densify_grad_threshold,
            opacity_threshold=self.densify_opacity_threshold,
            split_scale=self.densify_split_scale,
            start_step=self.densify_start,
            stop_step=self.densify_stop,
            interval=self.densify_interval,
        )


def parse_train_config(path) -> TrainConfig:
    """Read a `key = value` text file; unknown keys are an error."""
    cfg = TrainConfig()
    valid = {f.name: f.type for f in fields(TrainConfig)}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in valid:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        current = getattr(cfg, key)
        setattr(cfg, key, type(current)(value) if not isinstance(current, bool) else value.lower() in ("1", "true", "yes"))
    return cfg


PARAM_NAMES = ("means", "quats", "log_scales", "opacity_logits", "sh_intensity", "sh_raydrop")


def cloud_params(cloud: GaussianCloud) -> dict[str, np.ndarray]:
    return {name: getattr(cloud, name) for name in PARAM_NAMES}


def grads_as_params(grads) -> dict[str, np.ndarray]:
    return {
        "means": grads.d_means,
        "quats": grads.d_quats,
        "log_scales": grads.d_log_scales,
        "opacity_logits": grads.d_opacity_logits,
        "sh_intensity": grads.d_sh_intensity,
        "sh_raydrop": grads.d_sh_raydrop,
    }


@dataclass
class CaptureData:
    manifest: SceneManifest
    lidar: LidarConfig
    images: list[RangeImage]
    train_frames: list[int]
    test_frames: list[int]


def load_capture(scene_dir, test_every: int) -> CaptureData:
    manifest = load_manifest(scene_dir)
    images = []
    for rec in manifest.frames:
        if rec.range_image is None:
            raise ValueError(f"frame {rec.index} has no range image; not a capture directory")
        images.append(load_range_image(manifest.resolve(rec.range_image)))
    idx = list(range(len(manifest.frames)))
    if test_every > 0:
        test = [i for i in idx if i % test_every == 0]
        train = [i for i in idx if i % test_every != 0]
    else:
        test, train = [], idx
    if not train:
        raise ValueError(f"no training frames left with test_every={test_every}")
    lidar = manifest.lidar_with_poses()
    return CaptureData(manifest, lidar, images, train, test)


def build_initial_scene(capture: CaptureData, cfg: TrainConfig, rng: np.random.Generator) -> SceneGraph:
    """Lift captures to points, split by tracked boxes, seed Gaussians."""
    lidar = capture.lidar
    object_records = capture.manifest.objects
    obj_points: dict[str, list[np.ndarray]] = {r["id"]: [] for r in object_records}
    obj_intens: dict[str, list[np.ndarray]] = {r["id"]: [] for r in object_records}
    obj_sensors: dict[str, list[np.ndarray]] = {r["id"]: [] for r in object_records}
    bg_points = []
    bg_intens = []
    sensor_positions = []
    for f in capture.train_frames:
        img = capture.images[f]
        pts, intens = range_image_to_pointcloud(img, lidar, f, drop_threshold=None)
        sensor = lidar.pose(f)[:3, 3]
        sensor_positions.append(sensor)
        keep_bg = np.ones(len(pts), dtype=bool)
        for rec in object_records:
            raw_pose = rec["track"].get(str(f))
            if raw_pose is None:
                continue
            pose = np.asarray(raw_pose, dtype=np.float64)
            if pose.shape != (4, 4):
                continue
            local = transform_points(invert_pose(pose), pts)
            half = np.asarray(rec["box_dims"], dtype=np.float64) * 0.5
            inside = np.all(np.abs(local) <= half[None] * 1.05, axis=1)
            if inside.any():
                obj_points[rec["id"]].append(local[inside])
                obj_intens[rec["id"]].append(intens[inside])
                obj_sensors[rec["id"]].append(transform_points(invert_pose(pose), sensor[None])[0])
                keep_bg &= ~inside
        bg_points.append(pts[keep_bg])
        bg_intens.append(intens[keep_bg])

    points = np.concatenate(bg_points)
    intens = np.concatenate(bg_intens)
    points, intens = init.voxel_downsample(points, intens, cfg.voxel_size)
    normals = init.estimate_normals(points, cfg.knn, np.stack(sensor_positions))
    background = init.init_gaussians(points, normals, intens, cfg.sh_degree)
    log.info("background: %d primitives from %d voxels", len(background), len(points))

    objects = []
    for rec in object_records:
        pid = rec["id"]
        if obj_points[pid]:
            p = np.concatenate(obj_points[pid])
            i = np.concatenate(obj_intens[pid])
        else:
            p = np.zeros((0, 3))
            i = np.zeros(0)
        if len(p) > cfg.pad_target:
            sel = rng.choice(len(p), size=cfg.pad_target, replace=False)
            p, i = p[sel], i[sel]
        elif len(p) < cfg.pad_target:
            p, i = init.pad_object_points(p, i, rec["box_dims"], cfg.pad_target, rng)
        sensors = np.stack(obj_sensors[pid]) if obj_sensors[pid] else np.zeros((1, 3))
        normals = init.estimate_normals(p, min(cfg.knn, len(p) - 1), sensors)
        cloud = init.init_gaussians(p, normals, i, cfg.sh_degree)
        frames_avail = sorted(int(k) for k in rec["track"])
        poses = np.stack([np.asarray(rec["track"][str(k)], dtype=np.float64) for k in frames_avail])
        objects.append(
            ObjectModel(
                object_id=pid,
                cloud=cloud,
                box_dims=np.asarray(rec["box_dims"], dtype=np.float64),
                track_frames=np.array(frames_avail),
                track_rot=poses[:, :3, :3],
                track_trans=poses[:, :3, 3],
            )
        )
        log.info("object %s: %d primitives", pid, len(cloud))
    return SceneGraph(background, objects, capture.manifest.timestamps)


@dataclass
class ModelState:
    """Optimizer bookkeeping for one primitive set (background or object)."""

    adam_state: AdamState
    grad_norm_sum: np.ndarray
    grad_norm_count: np.ndarray

    @classmethod
    def for_cloud(cls, cloud: GaussianCloud) -> "ModelState":
        n = len(cloud)
        return cls(AdamState.for_params(cloud_params(cloud)), np.zeros(n), np.zeros(n))


def render_frame(scene: SceneGraph, lidar: LidarConfig, frame: int, trace_cfg: TraceConfig):
    flat = assemble(scene, frame)
    tree = bvh_for_primitives(flat.means, flat.rots, flat.scales)
    origins, dirs = generate_rays(lidar, frame)
    return flat, tree, origins, dirs, trace_forward(flat, tree, origins, dirs, trace_cfg)


def result_to_range_image(result, lidar: LidarConfig) -> RangeImage:
    h, w = lidar.beams, lidar.steps
    return RangeImage(
        depth=result.depth.reshape(h, w),
        intensity=result.intensity.reshape(h, w),
        raydrop=result.no_return_prob.reshape(h, w),
        acc_alpha=result.acc_alpha.reshape(h, w),
        hit=result.hit_mask.reshape(h, w),
    )


class Trainer:
    def __init__(self, capture: CaptureData, cfg: TrainConfig):
        self.capture = capture
        self.cfg = cfg
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))
        self.scene = build_initial_scene(capture, cfg, self.rng)
        self.trace_cfg = cfg.trace()
        self.weights = cfg.weights()
        self.adam = Adam(
            groups={
                "means": ParamGroup("means", cfg.lr_means, cfg.lr_means_final),
                "quats": ParamGroup("quats", cfg.lr_quats),
                "log_scales": ParamGroup("log_scales", cfg.lr_log_scales),
                "opacity_logits": ParamGroup("opacity_logits", cfg.lr_opacity),
                "sh_intensity": ParamGroup("sh_intensity", cfg.lr_sh),
                "sh_raydrop": ParamGroup("sh_raydrop", cfg.lr_sh),
            },
            total_steps=cfg.steps,
        )
        self.states = {name: ModelState.for_cloud(self._cloud(name)) for name, _, _ in self.scene.layout()}
        self.gt_clouds = {}
        for f in capture.train_frames:
            pts, _ = range_image_to_pointcloud(capture.images[f], capture.lidar, f, drop_threshold=None)
            self.gt_clouds[f] = pts
        self.step_count = 0
        self.log_lines: list[str] = []

    def _cloud(self, name: str) -> GaussianCloud:
        if name == "background":
            return self.scene.background
        return self.scene.object(name).cloud

    def train_step(self, frame: int) -> dict:
        cfg = self.cfg
        flat, tree, origins, dirs, result = render_frame(
            self.scene, self.capture.lidar, frame, self.trace_cfg
        )
        gt = self.capture.images[frame]
        cloud_args = {}
        if cfg.w_chamfer > 0 and self.step_count % max(cfg.cd_interval, 1) == 0:
            pix = np.flatnonzero(result.hit_mask & (result.no_return_prob <= DROP_THRESHOLD))
            if len(pix) and len(self.gt_clouds[frame]):
                rendered = origins[pix] + result.depth[pix, None] * dirs[pix]
                cd_val, cd_grads = loss_cd(rendered, self.gt_clouds[frame], return_grads=True)
                cloud_args = {"cloud_grads": (cd_val, cd_grads), "cloud_pixels": pix}
        report, upstream = render_loss_gradients(
            result,
            gt.depth.reshape(-1),
            gt.intensity.reshape(-1),
            gt.hit.reshape(-1),
            self.weights,
            ray_dirs=dirs,
            **cloud_args,
        )
        grads = trace_backward(flat, tree, origins, dirs, result, upstream, self.trace_cfg)
        # world-space position gradient magnitude, for densification
        world_norms = grads.position_grad_norms()
        routed = route_gradients(self.scene, frame, grads)
        for name, off, count in self.scene.layout():
            state = self.states[name]
            cloud = self._cloud(name)
            piece = routed[name]
            self.adam.step(cloud_params(cloud), grads_as_params(piece), state.adam_state)
            cloud.renormalize_quats()
            norms = world_norms[off : off + count]
            state.grad_norm_sum += norms
            state.grad_norm_count += norms > 0
        self.step_count += 1
        self._maybe_densify()
        return report.as_dict()

    def _maybe_densify(self):
        cfg = self.cfg
        if not (cfg.densify_start <= self.step_count <= cfg.densify_stop):
            return
        if self.step_count % cfg.densify_interval != 0:
            return
        total = sum(len(self._cloud(name)) for name, _, _ in self.scene.layout())
        if total >= cfg.densify_max_primitives:
            log.warning("densify skipped at step %d: primitive budget reached", self.step_count)
            return
        dcfg = cfg.densify()
        for name, _, _ in self.scene.layout():
            state = self.states[name]
            cloud = self._cloud(name)
            mean_norms = state.grad_norm_sum / np.maximum(state.grad_norm_count, 1)
            box = None if name == "background" else self.scene.object(name).box_dims
            new_cloud, res = densify_and_prune(cloud, mean_norms, dcfg, self.rng, box)
            if name == "background":
                self.scene.background = new_cloud
            else:
                self.scene.object(name).cloud = new_cloud
            state.adam_state = remap_adam_state(state.adam_state, res.source_index)
            n = len(new_cloud)
            state.grad_norm_sum = np.zeros(n)
            state.grad_norm_count = np.zeros(n)
            if res.n_cloned or res.n_split or res.n_pruned:
                log.info(
                    "densify %s @%d: +%d cloned +%d split -%d pruned -> %d",
                    name, self.step_count, res.n_cloned, res.n_split, res.n_pruned, n,
                )

    def evaluate_frame(self, frame: int, apply_drop: bool = True) -> float:
        """Held-out depth RMSE over pixels both the capture and the render
        returned; apply_drop=False scores the raw render (useful as the
        untrained baseline, whose ray-drop channel is uninformative)."""
        from .lidar import apply_raydrop

        _, _, _, _, result = render_frame(self.scene, self.capture.lidar, frame, self.trace_cfg)
        img = result_to_range_image(result, self.capture.lidar)
        if apply_drop:
            img = apply_raydrop(img, DROP_THRESHOLD)
        gt = self.capture.images[frame]
        mask = gt.hit & img.hit
        if not mask.any():
            return float("inf")
        return rmse(img.depth, gt.depth, mask)

    def train(self, log_path=None) -> None:
        cfg = self.cfg
        order = []
        t0 = time.time()
        for step in range(cfg.steps):
            if not order:
                order = list(self.rng.permutation(self.capture.train_frames))
            frame = int(order.pop())
            report = self.train_step(frame)
            if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.steps:
                eval_frame = (self.capture.test_frames or self.capture.train_frames)[0]
                test_rmse = self.evaluate_frame(eval_frame)
                line = (
                    f"step={step + 1} loss={report['total']:.6f} depth={report['depth']:.6f} "
                    f"intensity={report['intensity']:.6f} raydrop={report['raydrop']:.6f} "
                    f"chamfer={report['chamfer']:.6f} test_depth_rmse={test_rmse:.4f} "
                    f"primitives={sum(len(self._cloud(n)) for n, _, _ in self.scene.layout())} "
                    f"elapsed={time.time() - t0:.1f}s"
                )
                self.log_lines.append(line)
                log.info("%s", line)
                if log_path is not None:
                    Path(log_path).write_text("\n".join(self.log_lines) + "\n")

    def save_checkpoint(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        frames = [
            type(rec)(rec.index, rec.timestamp, rec.sensor_pose, None)
            for rec in self.capture.manifest.frames
        ]
        path = save_scenegraph(out_dir, self.scene, self.capture.lidar, frames)
        moments = {"step": np.array([self.states["background"].adam_state.step])}
        for name, _, _ in self.scene.layout():
            st = self.states[name].adam_state
            for pname in PARAM_NAMES:
                moments[f"{name}/m/{pname}"] = st.m[pname]
                moments[f"{name}/v/{pname}"] = st.v[pname]
        np.savez_compressed(out_dir / "optimizer.npz", **moments)
        return path


def train_scene(scene_dir, cfg: TrainConfig, out_dir) -> Trainer:
    capture = load_capture(scene_dir, cfg.test_every)
    trainer = Trainer(capture, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer.train(log_path=out / "train_log.txt")
    trainer.save_checkpoint(out)
    return trainer
