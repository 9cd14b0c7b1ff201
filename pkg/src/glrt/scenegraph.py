"""Dynamic scene composition: a static background plus rigid objects with
time-indexed poses, flattened into world-frame primitive arrays per frame.

Edits are pure: removing, inserting, or re-tracking an object returns a new
graph that shares primitive storage with the original. The flat assembly
carries an owner tag per primitive so gradients route back to the owning
model (object gradients are pulled into the object frame; poses themselves
are fixed and receive no gradient).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .gaussians import GaussianCloud, load_container, save_container
from .geom import (
    quat_left_matrix,
    quat_multiply,
    quat_slerp,
    quat_to_rotmat,
    rotmat_to_quat,
)
from .lidar import LidarConfig
from .tracer import FlatScene, RenderGradients


@dataclass
class ObjectModel:
    object_id: str
    cloud: GaussianCloud  # object frame
    box_dims: np.ndarray  # (3,) full extents, meters
    track_frames: np.ndarray  # (F,) strictly increasing frame indices
    track_rot: np.ndarray  # (F, 3, 3)
    track_trans: np.ndarray  # (F, 3)

    def __post_init__(self):
        self.box_dims = np.asarray(self.box_dims, dtype=np.float64).reshape(3)
        self.track_frames = np.asarray(self.track_frames, dtype=np.int64).reshape(-1)
        f = len(self.track_frames)
        self.track_rot = np.asarray(self.track_rot, dtype=np.float64).reshape(f, 3, 3)
        self.track_trans = np.asarray(self.track_trans, dtype=np.float64).reshape(f, 3)
        if f and np.any(np.diff(self.track_frames) <= 0):
            raise ValueError(f"object {self.object_id}: track frames must strictly increase")
        eye_err = np.abs(
            self.track_rot @ self.track_rot.transpose(0, 2, 1) - np.eye(3)
        ).max() if f else 0.0
        if eye_err > 1e-5:
            raise ValueError(f"object {self.object_id}: track rotations not orthonormal")

    def pose_at_frame(self, frame: int):
        pos = np.searchsorted(self.track_frames, frame)
        if pos >= len(self.track_frames) or self.track_frames[pos] != frame:
            raise KeyError(f"object {self.object_id} has no pose for frame {frame}")
        return self.track_rot[pos], self.track_trans[pos]

    def pose_at_time(self, t: float, frame_timestamps: np.ndarray):
        """Linear translation / slerp rotation between bracketing track
        frames; clamps to the track ends outside its time span."""
        times = frame_timestamps[self.track_frames]
        if t <= times[0]:
            return self.track_rot[0], self.track_trans[0]
        if t >= times[-1]:
            return self.track_rot[-1], self.track_trans[-1]
        hi = int(np.searchsorted(times, t, side="right"))
        lo = hi - 1
        s = (t - times[lo]) / (times[hi] - times[lo])
        trans = (1.0 - s) * self.track_trans[lo] + s * self.track_trans[hi]
        q = quat_slerp(rotmat_to_quat(self.track_rot[lo]), rotmat_to_quat(self.track_rot[hi]), s)
        return quat_to_rotmat(q), trans


@dataclass
class SceneGraph:
    background: GaussianCloud
    objects: list[ObjectModel] = field(default_factory=list)
    frame_timestamps: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.frame_timestamps = np.asarray(self.frame_timestamps, dtype=np.float64).reshape(-1)
        ids = [o.object_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate object ids: {ids}")

    def object(self, object_id: str) -> ObjectModel:
        for o in self.objects:
            if o.object_id == object_id:
                return o
        raise KeyError(f"no object {object_id!r} in scene")

    def layout(self) -> list[tuple[str, int, int]]:
        """(owner name, offset, count) runs of the assembled flat arrays."""
        out = [("background", 0, len(self.background))]
        off = len(self.background)
        for o in self.objects:
            out.append((o.object_id, off, len(o.cloud)))
            off += len(o.cloud)
        return out


def object_to_world(model: ObjectModel, frame: int) -> GaussianCloud:
    """Rigidly carry an object's primitives into the world frame."""
    rot, trans = model.pose_at_frame(frame)
    return _transform_cloud(model.cloud, rot, trans)


def _transform_cloud(cloud: GaussianCloud, rot: np.ndarray, trans: np.ndarray) -> GaussianCloud:
    out = cloud.copy()
    out.means = cloud.means @ rot.T + trans
    q_t = rotmat_to_quat(rot)
    out.quats = quat_multiply(q_t, cloud.quats)
    return out


def _assemble(scene: SceneGraph, poses: list[tuple[np.ndarray, np.ndarray]]) -> FlatScene:
    clouds = [scene.background]
    owner_tag = [np.full(len(scene.background), -1, dtype=np.int64)]
    owner_frame = [np.zeros(len(scene.background), dtype=np.int64)]
    frame_rot = [np.eye(3)]
    for j, (obj, (rot, trans)) in enumerate(zip(scene.objects, poses)):
        clouds.append(_transform_cloud(obj.cloud, rot, trans))
        owner_tag.append(np.full(len(obj.cloud), j, dtype=np.int64))
        owner_frame.append(np.full(len(obj.cloud), j + 1, dtype=np.int64))
        frame_rot.append(rot.T)  # world -> object, applied to SH view dirs
    merged = GaussianCloud.concatenate(clouds)
    flat = FlatScene.from_cloud(merged)
    flat.owner_tag = np.concatenate(owner_tag)
    flat.owner_frame = np.concatenate(owner_frame)
    flat.frame_rot = np.ascontiguousarray(np.stack(frame_rot))
    return flat


def assemble(scene: SceneGraph, frame: int) -> FlatScene:
    """Flatten background and posed objects for one training frame."""
    return _assemble(scene, [o.pose_at_frame(frame) for o in scene.objects])


def assemble_at_time(scene: SceneGraph, t: float) -> FlatScene:
    """Flatten at an arbitrary timestamp with interpolated object poses."""
    if len(scene.frame_timestamps) == 0:
        raise ValueError("scene has no frame timestamps to interpolate against")
    return _assemble(scene, [o.pose_at_time(t, scene.frame_timestamps) for o in scene.objects])


def remove_object(scene: SceneGraph, object_id: str) -> SceneGraph:
    scene.object(object_id)  # raises on unknown id
    return replace(scene, objects=[o for o in scene.objects if o.object_id != object_id])


def insert_object(scene: SceneGraph, model: ObjectModel) -> SceneGraph:
    if any(o.object_id == model.object_id for o in scene.objects):
        raise ValueError(f"object id {model.object_id!r} already present")
    return replace(scene, objects=scene.objects + [model])


def set_trajectory(scene: SceneGraph, object_id: str, track_frames, track_rot, track_trans):
    old = scene.object(object_id)
    new = ObjectModel(object_id, old.cloud, old.box_dims, track_frames, track_rot, track_trans)
    return replace(
        scene, objects=[new if o.object_id == object_id else o for o in scene.objects]
    )


def route_gradients(
    scene: SceneGraph, frame: int, flat_grads: RenderGradients
) -> dict[str, RenderGradients]:
    """Split flat world-frame gradients by owner; object position and
    rotation gradients are pulled back into the object frame."""
    out: dict[str, RenderGradients] = {}
    for name, off, count in scene.layout():
        sl = slice(off, off + count)
        piece = RenderGradients(
            flat_grads.d_means[sl].copy(),
            flat_grads.d_quats[sl].copy(),
            flat_grads.d_log_scales[sl].copy(),
            flat_grads.d_opacity_logits[sl].copy(),
            flat_grads.d_sh_intensity[sl].copy(),
            flat_grads.d_sh_raydrop[sl].copy(),
        )
        if name != "background":
            obj = scene.object(name)
            rot, _ = obj.pose_at_frame(frame)
            piece.d_means = piece.d_means @ rot
            left = quat_left_matrix(rotmat_to_quat(rot))
            piece.d_quats = piece.d_quats @ left
        out[name] = piece
    return out


# -- scene manifest -----------------------------------------------------------
#
# One JSON schema serves both roles: a capture directory (per-frame sensor
# poses and range-image paths) and a model checkpoint (primitive container
# paths). Relative paths resolve against the manifest's directory.

MANIFEST_NAME = "scene.json"


@dataclass
class FrameRecord:
    index: int
    timestamp: float
    sensor_pose: np.ndarray  # (4, 4) sensor -> world
    range_image: str | None = None


@dataclass
class SceneManifest:
    lidar: LidarConfig
    frames: list[FrameRecord]
    background_container: str | None = None
    objects: list[dict] = field(default_factory=list)
    base_dir: Path = field(default_factory=Path)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])

    def sensor_poses(self) -> np.ndarray:
        return np.stack([f.sensor_pose for f in self.frames])

    def lidar_with_poses(self) -> LidarConfig:
        cfg = LidarConfig.from_dict(self.lidar.to_dict())
        cfg.poses = self.sensor_poses()
        return cfg

    def resolve(self, rel: str) -> Path:
        return self.base_dir / rel


def save_manifest(directory, manifest: SceneManifest) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": "glrt-scene-manifest",
        "version": 1,
        "lidar": {k: v for k, v in manifest.lidar.to_dict().items() if k != "poses"},
        "frames": [
            {
                "index": f.index,
                "timestamp": f.timestamp,
                "sensor_pose": np.asarray(f.sensor_pose).tolist(),
                **({"range_image": f.range_image} if f.range_image else {}),
            }
            for f in manifest.frames
        ],
        "objects": manifest.objects,
    }
    if manifest.background_container:
        doc["background"] = {"container": manifest.background_container}
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=1))
    return path


def load_manifest(directory) -> SceneManifest:
    directory = Path(directory)
    path = directory if directory.name.endswith(".json") else directory / MANIFEST_NAME
    doc = json.loads(path.read_text())
    if doc.get("format") != "glrt-scene-manifest":
        raise ValueError(f"{path}: not a scene manifest")
    frames = [
        FrameRecord(
            index=int(f["index"]),
            timestamp=float(f["timestamp"]),
            sensor_pose=np.asarray(f["sensor_pose"], dtype=np.float64),
            range_image=f.get("range_image"),
        )
        for f in doc["frames"]
    ]
    return SceneManifest(
        lidar=LidarConfig.from_dict(doc["lidar"]),
        frames=frames,
        background_container=doc.get("background", {}).get("container"),
        objects=doc.get("objects", []),
        base_dir=path.parent,
    )


def object_from_record(record: dict, base_dir: Path) -> ObjectModel:
    track = record["track"]
    frames = sorted(int(k) for k in track)
    poses = np.stack([np.asarray(track[str(k)], dtype=np.float64) for k in frames])
    return ObjectModel(
        object_id=record["id"],
        cloud=load_container(base_dir / record["container"]),
        box_dims=np.asarray(record["box_dims"], dtype=np.float64),
        track_frames=np.array(frames),
        track_rot=poses[:, :3, :3],
        track_trans=poses[:, :3, 3],
    )


def object_to_record(obj: ObjectModel, container_rel: str) -> dict:
    track = {}
    for i, frame in enumerate(obj.track_frames):
        pose = np.eye(4)
        pose[:3, :3] = obj.track_rot[i]
        pose[:3, 3] = obj.track_trans[i]
        track[str(int(frame))] = pose.tolist()
    return {
        "id": obj.object_id,
        "box_dims": obj.box_dims.tolist(),
        "container": container_rel,
        "track": track,
    }


def load_scenegraph(manifest: SceneManifest) -> SceneGraph:
    if manifest.background_container is None:
        raise ValueError("manifest has no primitive containers (not a checkpoint)")
    background = load_container(manifest.resolve(manifest.background_container))
    objects = [object_from_record(rec, manifest.base_dir) for rec in manifest.objects]
    return SceneGraph(background, objects, manifest.timestamps)


def save_scenegraph(
    directory, scene: SceneGraph, lidar: LidarConfig, frames: list[FrameRecord]
) -> Path:
    """Write a checkpoint: containers plus a manifest referencing them."""
    directory = Path(directory)
    (directory / "objects").mkdir(parents=True, exist_ok=True)
    save_container(directory / "background.glrt", scene.background)
    records = []
    for obj in scene.objects:
        rel = f"objects/{obj.object_id}.glrt"
        save_container(directory / rel, obj.cloud)
        records.append(object_to_record(obj, rel))
    manifest = SceneManifest(
        lidar=lidar,
        frames=frames,
        background_container="background.glrt",
        objects=records,
        base_dir=directory,
    )
    return save_manifest(directory, manifest)
