"""Analytic test scenes: planes, boxes, and spheres with flat materials
and rigid per-frame motion, ray-cast exactly to produce ground-truth range
images, clouds, and a scene manifest in the same format the trainer
ingests. Moving bodies are tagged as objects with tracks and box dims."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .formats import save_range_image, write_pfm
from .lidar import LidarConfig, RangeImage, generate_rays
from .scenegraph import FrameRecord, SceneManifest, save_manifest


@dataclass
class Material:
    intensity: float = 0.5
    drop_prob: float = 0.0


@dataclass
class Body:
    kind: str  # plane | box | sphere
    material: Material
    point: np.ndarray | None = None  # plane anchor
    normal: np.ndarray | None = None  # plane normal (unit)
    dims: np.ndarray | None = None  # box full extents (object frame)
    center: np.ndarray | None = None  # sphere/box static center
    radius: float = 0.0  # sphere
    object_id: str | None = None  # set for moving bodies
    track_trans: np.ndarray | None = None  # (F, 3) per-frame translation
    track_rot: np.ndarray | None = None  # (F, 3, 3)

    def pose(self, frame: int):
        if self.track_trans is not None:
            rot = self.track_rot[frame] if self.track_rot is not None else np.eye(3)
            return rot, self.track_trans[frame]
        return np.eye(3), (self.center if self.center is not None else np.zeros(3))


@dataclass
class SynthScene:
    bodies: list[Body]
    lidar: LidarConfig
    n_frames: int
    frame_rate: float = 10.0
    cos_incidence: bool = True
    seed: int = 0

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(self.n_frames) / self.frame_rate

    def objects(self) -> list[Body]:
        return [b for b in self.bodies if b.object_id is not None]


def _as_vec(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(3)


def build_scene(spec: dict) -> SynthScene:
    """Instantiate an analytic scene from its JSON-style description."""
    n_frames = int(spec.get("frames", 1))
    bodies = []
    for i, b in enumerate(spec.get("bodies", [])):
        mat = Material(float(b.get("intensity", 0.5)), float(b.get("drop_prob", 0.0)))
        kind = b["type"]
        body = Body(kind=kind, material=mat)
        if kind == "plane":
            body.point = _as_vec(b["point"])
            n = _as_vec(b["normal"])
            body.normal = n / np.linalg.norm(n)
        elif kind == "box":
            body.dims = _as_vec(b["dims"])
            body.center = _as_vec(b.get("center", [0, 0, 0]))
        elif kind == "sphere":
            body.center = _as_vec(b["center"])
            body.radius = float(b["radius"])
        else:
            raise ValueError(f"unknown body type {kind!r}")
        motion = b.get("motion")
        if motion is not None:
            if kind == "plane":
                raise ValueError("planes cannot move")
            if motion.get("kind", "linear") != "linear":
                raise ValueError(f"unsupported motion kind {motion.get('kind')!r}")
            start = _as_vec(motion["start"])
            end = _as_vec(motion["end"])
            s = np.linspace(0.0, 1.0, n_frames)[:, None]
            body.track_trans = (1.0 - s) * start + s * end
            body.track_rot = np.broadcast_to(np.eye(3), (n_frames, 3, 3)).copy()
            body.object_id = b.get("id", f"object_{i}")
            body.center = None
        bodies.append(body)
    lid = spec["lidar"]
    fov_up = np.deg2rad(lid["fov_up_deg"]) if "fov_up_deg" in lid else float(lid["fov_up"])
    fov_down = np.deg2rad(lid["fov_down_deg"]) if "fov_down_deg" in lid else float(lid["fov_down"])
    sensor = spec.get("sensor", {"kind": "static", "position": [0.0, 0.0, 1.8]})
    poses = _sensor_poses(sensor, n_frames)
    config = LidarConfig(
        beams=int(lid["beams"]),
        steps=int(lid["steps"]),
        fov_up=float(fov_up),
        fov_down=float(fov_down),
        near=float(lid.get("near", 0.2)),
        far=float(lid.get("far", 80.0)),
        poses=poses,
    )
    return SynthScene(
        bodies=bodies,
        lidar=config,
        n_frames=n_frames,
        frame_rate=float(spec.get("frame_rate", 10.0)),
        cos_incidence=bool(spec.get("cos_incidence", True)),
        seed=int(spec.get("seed", 0)),
    )


def _sensor_poses(sensor: dict, n_frames: int) -> np.ndarray:
    kind = sensor.get("kind", "static")
    yaw = np.deg2rad(float(sensor.get("yaw_deg", 0.0)))
    rot = np.array(
        [[np.cos(yaw), -np.sin(yaw), 0.0], [np.sin(yaw), np.cos(yaw), 0.0], [0.0, 0.0, 1.0]]
    )
    poses = np.tile(np.eye(4), (n_frames, 1, 1))
    poses[:, :3, :3] = rot
    if kind == "static":
        poses[:, :3, 3] = _as_vec(sensor["position"])
    elif kind == "linear":
        s = np.linspace(0.0, 1.0, n_frames)[:, None]
        poses[:, :3, 3] = (1.0 - s) * _as_vec(sensor["start"]) + s * _as_vec(sensor["end"])
    else:
        raise ValueError(f"unsupported sensor kind {kind!r}")
    return poses


def _intersect_plane(body: Body, origins, dirs):
    denom = dirs @ body.normal
    num = (body.point[None] - origins) @ body.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
    t = np.where(t > 0.0, t, np.inf)
    normals = np.broadcast_to(body.normal, origins.shape)
    return t, normals


def _intersect_box(body: Body, origins, dirs, frame: int):
    rot, trans = body.pose(frame)
    o = (origins - trans) @ rot  # world -> object
    d = dirs @ rot
    half = body.dims * 0.5
    t_near = np.full(len(o), -np.inf)
    t_far = np.full(len(o), np.inf)
    axis_near = np.zeros(len(o), dtype=np.int64)
    sign_near = np.ones(len(o))
    for a in range(3):
        da = d[:, a]
        oa = o[:, a]
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (-half[a] - oa) / da
            t1 = (half[a] - oa) / da
        lo = np.minimum(t0, t1)
        hi = np.maximum(t0, t1)
        par = np.abs(da) < 1e-300
        inside = (oa >= -half[a]) & (oa <= half[a])
        lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
        upd = lo > t_near
        axis_near = np.where(upd, a, axis_near)
        sign_near = np.where(upd, -np.sign(da), sign_near)
        t_near = np.maximum(t_near, lo)
        t_far = np.minimum(t_far, hi)
    hit = (t_near <= t_far) & (t_near > 0.0)
    t = np.where(hit, t_near, np.inf)
    n_obj = np.zeros((len(o), 3))
    n_obj[np.arange(len(o)), axis_near] = sign_near
    normals = n_obj @ rot.T
    return t, normals


def _intersect_sphere(body: Body, origins, dirs, frame: int):
    _, center = body.pose(frame)
    oc = origins - center
    b = np.einsum("ij,ij->i", oc, dirs)
    c = np.einsum("ij,ij->i", oc, oc) - body.radius**2
    disc = b * b - c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t1 = -b - sq
    t2 = -b + sq
    t = np.where(t1 > 0.0, t1, np.where(t2 > 0.0, t2, np.inf))
    t = np.where(disc >= 0.0, t, np.inf)
    p = origins + t[:, None] * dirs
    normals = (p - center) / body.radius
    return t, normals


def raycast_frame(scene: SynthScene, frame: int):
    """Exact nearest-hit ray cast of one frame.

    Returns (RangeImage, body_index image) where body_index is -1 on sky.
    The raydrop channel is the realized no-return mask (Bernoulli per
    material, seeded by (scene.seed, frame)); dropped pixels keep no depth.
    """
    config = scene.lidar
    origins, dirs = generate_rays(config, frame)
    n = len(origins)
    best_t = np.full(n, np.inf)
    best_body = np.full(n, -1, dtype=np.int64)
    best_cos = np.zeros(n)
    for bi, body in enumerate(scene.bodies):
        if body.kind == "plane":
            t, normals = _intersect_plane(body, origins, dirs)
        elif body.kind == "box":
            t, normals = _intersect_box(body, origins, dirs, frame)
        else:
            t, normals = _intersect_sphere(body, origins, dirs, frame)
        t = np.where((t >= config.near) & (t <= config.far), t, np.inf)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_body = np.where(closer, bi, best_body)
        cos = -np.einsum("ij,ij->i", dirs, normals)
        best_cos = np.where(closer, np.abs(cos), best_cos)
    hit_geom = np.isfinite(best_t)
    intensity = np.zeros(n)
    drop_p = np.zeros(n)
    for bi, body in enumerate(scene.bodies):
        sel = best_body == bi
        intensity[sel] = body.material.intensity
        drop_p[sel] = body.material.drop_prob
    if scene.cos_incidence:
        intensity *= np.clip(best_cos, 0.05, 1.0)
    rng = np.random.default_rng(np.random.SeedSequence([scene.seed, frame]))
    dropped = rng.random(n) < drop_p
    returned = hit_geom & ~dropped

    h, w = config.beams, config.steps
    img = RangeImage.zeros(h, w)
    img.depth = np.where(returned, best_t, 0.0).reshape(h, w)
    img.intensity = np.where(returned, intensity, 0.0).reshape(h, w)
    img.raydrop = (~returned).astype(np.float64).reshape(h, w)
    img.acc_alpha = returned.astype(np.float64).reshape(h, w)
    img.hit = returned.reshape(h, w)
    return img, best_body.reshape(h, w)


def raycast_gt(scene: SynthScene, frame: int):
    """Range image, world-frame cloud (points, intensities), and per-body
    hit masks for one frame."""
    img, body_idx = raycast_frame(scene, frame)
    from .lidar import range_image_to_pointcloud

    points, intens = range_image_to_pointcloud(img, scene.lidar, frame, drop_threshold=None)
    masks = {}
    for bi, body in enumerate(scene.bodies):
        if body.object_id is not None:
            masks[body.object_id] = body_idx == bi
    return img, (points, intens), masks


def object_track_records(scene: SynthScene) -> list[dict]:
    records = []
    for body in scene.objects():
        track = {}
        for f in range(scene.n_frames):
            rot, trans = body.pose(f)
            pose = np.eye(4)
            pose[:3, :3] = rot
            pose[:3, 3] = trans
            track[str(f)] = pose.tolist()
        records.append(
            {
                "id": body.object_id,
                "box_dims": (body.dims * 1.0).tolist() if body.dims is not None
                else [2 * body.radius] * 3,
                "track": track,
            }
        )
    return records


def generate_dataset(scene: SynthScene, out_dir) -> Path:
    """Ray-cast every frame and write a capture directory: range-image PFMs,
    body-index PFMs, and the scene manifest."""
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    frames = []
    for f in range(scene.n_frames):
        img, body_idx = raycast_frame(scene, f)
        rel = f"frames/frame_{f:04d}.pfm"
        save_range_image(out_dir / rel, img)
        write_pfm(out_dir / "frames" / f"body_{f:04d}.pfm", body_idx.astype(np.float32))
        frames.append(
            FrameRecord(
                index=f,
                timestamp=float(scene.timestamps[f]),
                sensor_pose=scene.lidar.pose(f),
                range_image=rel,
            )
        )
    manifest = SceneManifest(
        lidar=scene.lidar,
        frames=frames,
        objects=object_track_records(scene),
        base_dir=out_dir,
    )
    save_manifest(out_dir, manifest)
    return out_dir


def load_scene_spec(path) -> SynthScene:
    return build_scene(json.loads(Path(path).read_text()))
