"""Panoramic LiDAR geometry: spherical projection, ray batches, and the
range-image <-> point-cloud conversions.

Pixel convention: rays go through pixel centers. Row h covers elevations
descending from f_up, column w covers azimuths descending from +pi, and
projection of a generated ray direction recovers its own pixel exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LidarConfig:
    beams: int  # H
    steps: int  # W
    fov_up: float  # radians, > fov_down
    fov_down: float  # radians, typically negative
    near: float = 0.2
    far: float = 80.0
    poses: np.ndarray | None = None  # (F, 4, 4) sensor -> world
    elevations: np.ndarray | None = None  # optional per-row elevation table

    def __post_init__(self):
        if self.beams < 1 or self.steps < 1:
            raise ValueError("beams and steps must be >= 1")
        if self.fov_up <= self.fov_down:
            raise ValueError("fov_up must exceed fov_down")
        if not 0 <= self.near < self.far:
            raise ValueError("need 0 <= near < far")
        if self.poses is not None:
            self.poses = np.asarray(self.poses, dtype=np.float64).reshape(-1, 4, 4)
        if self.elevations is not None:
            self.elevations = np.asarray(self.elevations, dtype=np.float64)
            if self.elevations.shape != (self.beams,):
                raise ValueError("elevation table length must equal beam count")

    @property
    def fov_v(self) -> float:
        return abs(self.fov_up) + abs(self.fov_down)

    def pose(self, frame: int) -> np.ndarray:
        if self.poses is None:
            return np.eye(4)
        if not 0 <= frame < len(self.poses):
            raise IndexError(f"frame {frame} outside {len(self.poses)} poses")
        return self.poses[frame]

    def row_elevations(self) -> np.ndarray:
        if self.elevations is not None:
            return self.elevations
        h = np.arange(self.beams, dtype=np.float64)
        return self.fov_up - (h + 0.5) / self.beams * self.fov_v

    def to_dict(self) -> dict:
        out = {
            "beams": self.beams,
            "steps": self.steps,
            "fov_up": self.fov_up,
            "fov_down": self.fov_down,
            "near": self.near,
            "far": self.far,
        }
        if self.poses is not None:
            out["poses"] = self.poses.tolist()
        if self.elevations is not None:
            out["elevations"] = self.elevations.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LidarConfig":
        return cls(
            beams=int(d["beams"]),
            steps=int(d["steps"]),
            fov_up=float(d["fov_up"]),
            fov_down=float(d["fov_down"]),
            near=float(d.get("near", 0.2)),
            far=float(d.get("far", 80.0)),
            poses=np.asarray(d["poses"], dtype=np.float64) if "poses" in d else None,
            elevations=(
                np.asarray(d["elevations"], dtype=np.float64)
                if d.get("elevations") is not None
                else None
            ),
        )


CHANNELS = ("depth", "intensity", "raydrop", "acc_alpha", "hit")


@dataclass
class RangeImage:
    """H x W LiDAR view: depth (m), intensity, no-return probability,
    accumulated alpha, and a boolean hit mask."""

    depth: np.ndarray
    intensity: np.ndarray
    raydrop: np.ndarray
    acc_alpha: np.ndarray
    hit: np.ndarray

    def __post_init__(self):
        shape = self.depth.shape
        for name in CHANNELS:
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"channel {name} shape {arr.shape} != {shape}")
        self.hit = self.hit.astype(bool)

    @property
    def shape(self):
        return self.depth.shape

    @classmethod
    def zeros(cls, beams: int, steps: int) -> "RangeImage":
        z = lambda: np.zeros((beams, steps), dtype=np.float64)
        return cls(z(), z(), z(), z(), np.zeros((beams, steps), dtype=bool))

    def copy(self) -> "RangeImage":
        return RangeImage(
            self.depth.copy(),
            self.intensity.copy(),
            self.raydrop.copy(),
            self.acc_alpha.copy(),
            self.hit.copy(),
        )

    def stack(self) -> np.ndarray:
        return np.stack(
            [self.depth, self.intensity, self.raydrop, self.acc_alpha, self.hit.astype(np.float64)]
        )

    @classmethod
    def from_stack(cls, planes: np.ndarray) -> "RangeImage":
        if planes.shape[0] != len(CHANNELS):
            raise ValueError(f"expected {len(CHANNELS)} channel planes")
        return cls(planes[0], planes[1], planes[2], planes[3], planes[4] > 0.5)


def spherical_from_point(p):
    """(distance, azimuth, elevation) of a point in the sensor frame."""
    p = np.asarray(p, dtype=np.float64)
    d = np.linalg.norm(p, axis=-1)
    if np.any(d <= 0.0):
        raise ValueError("cannot project the sensor origin")
    theta = np.arctan2(p[..., 1], p[..., 0])
    phi = np.arcsin(np.clip(p[..., 2] / d, -1.0, 1.0))
    return d, theta, phi


def project_to_pixel(theta, phi, config: LidarConfig, clamp: bool = True):
    """Map (azimuth, elevation) to integer pixel indices.

    Continuous coordinates follow h = (1 - (phi + |f_down|)/f_v) * H and
    w = (1 - theta/pi)/2 * W, floored. With clamp=False, out-of-FOV
    elevations return h = -1 instead of being clamped silently.
    """
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    hc = (1.0 - (phi + abs(config.fov_down)) / config.fov_v) * config.beams
    wc = (1.0 - theta / np.pi) / 2.0 * config.steps
    h = np.floor(hc).astype(np.int64)
    w = np.floor(wc).astype(np.int64)
    w = np.clip(w, 0, config.steps - 1)
    if clamp:
        h = np.clip(h, 0, config.beams - 1)
    else:
        in_fov = (phi >= config.fov_down - 1e-12) & (phi <= config.fov_up + 1e-12)
        h = np.clip(h, 0, config.beams - 1)
        h = np.where(in_fov, h, -1)
    return h, w


def generate_rays(config: LidarConfig, frame: int = 0):
    """One ray per pixel center; returns origins and unit directions,
    each (H*W, 3), row-major over the range image."""
    pose = config.pose(frame)
    phi = config.row_elevations()
    w = np.arange(config.steps, dtype=np.float64)
    theta = np.pi * (1.0 - 2.0 * (w + 0.5) / config.steps)
    cp, sp = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    dirs = np.empty((config.beams, config.steps, 3), dtype=np.float64)
    dirs[..., 0] = cp[:, None] * ct[None, :]
    dirs[..., 1] = cp[:, None] * st[None, :]
    dirs[..., 2] = sp[:, None]
    dirs = dirs.reshape(-1, 3) @ pose[:3, :3].T
    origins = np.broadcast_to(pose[:3, 3], dirs.shape).copy()
    return origins, dirs


def range_image_to_pointcloud(
    img: RangeImage, config: LidarConfig, frame: int = 0, drop_threshold: float | None = 0.5
):
    """Lift hit pixels back to 3D; returns (points (M,3), intensity (M,)).

    Pixels whose no-return probability exceeds the threshold are skipped;
    pass drop_threshold=None to keep every hit pixel.
    """
    origins, dirs = generate_rays(config, frame)
    mask = img.hit.reshape(-1)
    if drop_threshold is not None:
        mask = mask & (img.raydrop.reshape(-1) <= drop_threshold)
    depth = img.depth.reshape(-1)[mask]
    points = origins[mask] + depth[:, None] * dirs[mask]
    return points, img.intensity.reshape(-1)[mask]


def pointcloud_to_range_image(
    points, intensities, config: LidarConfig, frame: int = 0
) -> RangeImage:
    """Z-buffer projection of a world-frame cloud: nearest depth wins."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if intensities is None:
        intensities = np.zeros(len(points))
    intensities = np.asarray(intensities, dtype=np.float64).reshape(-1)
    pose = config.pose(frame)
    local = (points - pose[:3, 3]) @ pose[:3, :3]
    d = np.linalg.norm(local, axis=1)
    keep = (d >= config.near) & (d <= config.far)
    local, d, inten = local[keep], d[keep], intensities[keep]
    img = RangeImage.zeros(config.beams, config.steps)
    if len(d) == 0:
        img.raydrop[:] = 1.0
        return img
    _, theta, phi = spherical_from_point(local)
    h, w = project_to_pixel(theta, phi, config, clamp=False)
    ok = h >= 0
    h, w, d, inten = h[ok], w[ok], d[ok], inten[ok]
    # process in decreasing depth so the nearest write lands last
    order = np.argsort(-d, kind="stable")
    h, w, d, inten = h[order], w[order], d[order], inten[order]
    img.depth[h, w] = d
    img.intensity[h, w] = inten
    img.hit[h, w] = True
    img.acc_alpha[h, w] = 1.0
    img.raydrop[:] = (~img.hit).astype(np.float64)
    return img


def apply_raydrop(img: RangeImage, threshold: float) -> RangeImage:
    """Zero out returns whose no-return probability exceeds the threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    out = img.copy()
    dropped = out.raydrop > threshold
    out.hit &= ~dropped
    out.depth[dropped] = 0.0
    out.intensity[dropped] = 0.0
    return out
