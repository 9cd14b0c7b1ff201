"""Seeding Gaussian sets from fused LiDAR point clouds.

Background points are fused across frames, voxel-downsampled, and given
normal-guided orientations from k-NN covariance; disk extents come from
local point spacing. Object clouds are padded with uniform box samples up
to a fixed budget before the same treatment.
"""

from __future__ import annotations

import numpy as np

from .gaussians import GaussianCloud, logit
from .geom import frame_from_normal, rotmat_to_quat, transform_points
from .knn import build_grid, k_nearest_neighbors

DEFAULT_VOXEL = 0.15  # meters
DEFAULT_KNN = 16
DEFAULT_PAD_TARGET = 8000
SCALE_BOUNDS = (1e-3, 2.0)  # meters
INIT_OPACITY = 0.1


def fuse_and_downsample(clouds, poses, voxel: float = DEFAULT_VOXEL):
    """Merge per-frame sensor-frame clouds into the world frame, keeping
    one centroid per occupied voxel. Returns (points, intensities)."""
    if len(clouds) == 0:
        raise ValueError("no input clouds")
    pts = []
    intens = []
    for (p, i), pose in zip(clouds, poses):
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        pts.append(transform_points(pose, p))
        intens.append(np.asarray(i, dtype=np.float64).reshape(-1))
    points = np.concatenate(pts)
    intensities = np.concatenate(intens)
    if len(points) == 0:
        raise ValueError("input clouds are empty")
    return voxel_downsample(points, intensities, voxel)


def voxel_downsample(points, intensities, voxel: float):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    intensities = np.asarray(intensities, dtype=np.float64).reshape(-1)
    origin = points.min(axis=0)
    coords = np.floor((points - origin) / voxel).astype(np.int64)
    dims = coords.max(axis=0) + 1
    linear = (coords[:, 0] * dims[1] + coords[:, 1]) * dims[2] + coords[:, 2]
    order = np.argsort(linear, kind="stable")
    linear_sorted = linear[order]
    uniq, start = np.unique(linear_sorted, return_index=True)
    counts = np.diff(np.append(start, len(linear_sorted)))
    sums = np.add.reduceat(points[order], start, axis=0)
    isums = np.add.reduceat(intensities[order], start)
    return sums / counts[:, None], isums / counts


def estimate_normals(points, k: int = DEFAULT_KNN, sensor_origins=None):
    """Unit normals from the smallest covariance eigenvector of each
    point's k nearest neighbors, oriented toward the nearest sensor."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) <= k:
        raise ValueError(f"need more than k={k} points, got {len(points)}")
    grid = build_grid(points, cell=max(0.25, 1e-3))
    _, idx = k_nearest_neighbors(grid, points, k)
    neigh = points[idx]  # (N, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]  # smallest eigenvalue
    # degenerate neighborhoods (rank < 2): fall back to the sensor direction
    spread = np.linalg.norm(centered, axis=2).max(axis=1)
    degenerate = spread < 1e-9
    if sensor_origins is None:
        sensor_origins = np.zeros((1, 3))
    sensor_origins = np.asarray(sensor_origins, dtype=np.float64).reshape(-1, 3)
    d2 = ((points[:, None, :] - sensor_origins[None]) ** 2).sum(axis=2)
    to_sensor = sensor_origins[np.argmin(d2, axis=1)] - points
    norms = np.linalg.norm(to_sensor, axis=1, keepdims=True)
    to_sensor = np.divide(to_sensor, norms, out=np.zeros_like(to_sensor), where=norms > 0)
    if np.any(degenerate):
        normals[degenerate] = to_sensor[degenerate]
    flip = np.einsum("ij,ij->i", normals, to_sensor) < 0
    normals[flip] *= -1.0
    lens = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.maximum(lens, 1e-12)


def init_gaussians(
    points,
    normals,
    intensities=None,
    sh_degree: int = 2,
    scale_bounds=SCALE_BOUNDS,
) -> GaussianCloud:
    """One disk per point: normal-aligned orientation, extent from the mean
    distance to the 3 nearest neighbors, opacity 0.1, degree-0 intensity
    matching the observed value, neutral ray-drop logits."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    cloud = GaussianCloud.empty(n, sh_degree)
    cloud.means = points.copy()
    quats = np.empty((n, 4))
    for i in range(n):
        quats[i] = rotmat_to_quat(frame_from_normal(normals[i]))
    cloud.quats = quats
    if n > 4:
        grid = build_grid(points, cell=max(0.25, 1e-3))
        d2, _ = k_nearest_neighbors(grid, points, 4)  # self + 3 neighbors
        spacing = np.sqrt(d2[:, 1:]).mean(axis=1)
    else:
        spacing = np.full(n, scale_bounds[1])
    spacing = np.clip(spacing, scale_bounds[0], scale_bounds[1])
    cloud.log_scales = np.log(spacing)[:, None].repeat(2, axis=1)
    cloud.opacity_logits = np.full(n, float(logit(INIT_OPACITY)))
    if intensities is not None:
        from .sh import sh_basis

        y00 = sh_basis(np.array([0.0, 0.0, 1.0]), 0)[0]
        vals = np.clip(np.asarray(intensities, dtype=np.float64).reshape(-1), 1e-4, 1 - 1e-4)
        cloud.sh_intensity[:, 0] = logit(vals) / y00
    return cloud


def pad_object_points(points, intensities, box_dims, target: int, rng: np.random.Generator):
    """Top up an object cloud with uniform samples inside its (centered)
    bounding box until it holds exactly ``target`` points."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if intensities is None:
        intensities = np.zeros(len(points))
    intensities = np.asarray(intensities, dtype=np.float64).reshape(-1)
    if target < len(points):
        raise ValueError(f"target {target} below existing count {len(points)}")
    n_new = target - len(points)
    if n_new == 0:
        return points, intensities
    half = np.asarray(box_dims, dtype=np.float64) * 0.5
    fresh = rng.uniform(-half, half, size=(n_new, 3))
    mean_i = intensities.mean() if len(intensities) else 0.5
    return np.concatenate([points, fresh]), np.concatenate(
        [intensities, np.full(n_new, mean_i)]
    )
