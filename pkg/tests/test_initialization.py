"""Point-cloud fusion, normal estimation, and Gaussian seeding."""

import numpy as np
import pytest

from glrt.bvh import bvh_for_primitives
from glrt.initialization import (
    estimate_normals,
    fuse_and_downsample,
    init_gaussians,
    pad_object_points,
    voxel_downsample,
)
from glrt.tracer import FlatScene, TraceConfig, trace_forward


class TestFuse:
    def test_single_point(self):
        pts, intens = fuse_and_downsample([(np.array([[1.0, 2.0, 3.0]]), [0.5])], [np.eye(4)])
        np.testing.assert_array_equal(pts, [[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(intens, [0.5])

    def test_two_points_one_voxel_centroid(self):
        cloud = np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]])
        pts, intens = fuse_and_downsample([(cloud, [0.0, 1.0])], [np.eye(4)], voxel=0.15)
        np.testing.assert_allclose(pts, [[0.05, 0.0, 0.0]], atol=1e-12)
        np.testing.assert_allclose(intens, [0.5])

    def test_grid_reduction_factor(self):
        # 0.05 m pitch grid downsampled at 0.15 m: 3x3x3 points per voxel
        g = np.arange(30) * 0.05
        pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
        out, _ = voxel_downsample(pts, np.zeros(len(pts)), 0.15)
        assert len(out) == 1000
        assert len(pts) / len(out) == 27.0

    def test_pose_applied(self):
        pose = np.eye(4)
        pose[:3, 3] = [10.0, 0.0, 0.0]
        pts, _ = fuse_and_downsample([(np.zeros((1, 3)), [0.0])], [pose])
        np.testing.assert_array_equal(pts, [[10.0, 0.0, 0.0]])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fuse_and_downsample([], [])


class TestNormals:
    def test_plane_normals(self, rng):
        pts = np.column_stack([rng.uniform(-5, 5, 400), rng.uniform(-5, 5, 400), np.zeros(400)])
        normals = estimate_normals(pts, 16, sensor_origins=np.array([[0.0, 0.0, 3.0]]))
        np.testing.assert_allclose(np.abs(normals[:, 2]), 1.0, atol=1e-9)
        assert np.all(normals[:, 2] > 0)  # oriented toward the sensor

    def test_sphere_normals_radial(self, rng):
        n = 3000
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        normals = estimate_normals(v, 16, sensor_origins=np.zeros((1, 3)))
        cos = np.abs(np.einsum("ij,ij->i", normals, v))
        # radial within 5 degrees for k=16 on a unit sphere
        assert np.quantile(np.degrees(np.arccos(np.clip(cos, -1, 1))), 0.99) < 5.0

    def test_k_too_large_rejected(self, rng):
        pts = rng.normal(size=(10, 3))
        with pytest.raises(ValueError):
            estimate_normals(pts, 10)


class TestInitGaussians:
    def test_disk_normals_match_point_normals(self, rng):
        pts = rng.uniform(-3, 3, (50, 3))
        normals = rng.normal(size=(50, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        cloud = init_gaussians(pts, normals)
        disk_n = cloud.rotations()[:, :, 2]
        dots = np.abs(np.einsum("ij,ij->i", disk_n, normals))
        np.testing.assert_allclose(dots, 1.0, atol=1e-9)

    def test_scale_clamped_for_isolated_point(self):
        pts = np.array([[0.0, 0, 0], [100.0, 0, 0], [0, 100.0, 0], [0, 0, 100.0], [50.0, 50, 0]])
        normals = np.tile([0.0, 0.0, 1.0], (5, 1))
        cloud = init_gaussians(pts, normals)
        assert np.all(cloud.scales >= 1e-3 - 1e-12)
        assert np.all(cloud.scales <= 2.0 + 1e-12)

    def test_opacity_and_raydrop_defaults(self, rng):
        pts = rng.uniform(-3, 3, (20, 3))
        normals = np.tile([0.0, 0.0, 1.0], (20, 1))
        cloud = init_gaussians(pts, normals)
        np.testing.assert_allclose(cloud.opacities, 0.1, atol=1e-12)
        np.testing.assert_array_equal(cloud.sh_raydrop, 0.0)

    def test_intensity_dc_matches_observation(self, rng):
        pts = rng.uniform(-3, 3, (30, 3))
        normals = np.tile([0.0, 0.0, 1.0], (30, 1))
        intens = rng.uniform(0.1, 0.9, 30)
        cloud = init_gaussians(pts, normals, intens)
        from glrt.gaussians import sigmoid
        from glrt.sh import sh_basis

        y00 = sh_basis(np.array([0.0, 0.0, 1.0]), 0)[0]
        recovered = sigmoid(cloud.sh_intensity[:, 0] * y00)
        np.testing.assert_allclose(recovered, intens, atol=1e-9)

    def test_plane_cloud_renders_near_plane(self, rng):
        # seeded plane scene renders within 0.3 m of the plane untrained
        g = np.linspace(-6, 6, 40)
        pts = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
        pts = np.column_stack([pts, np.zeros(len(pts))])
        normals = estimate_normals(pts, 16, sensor_origins=np.array([[0.0, 0.0, 2.0]]))
        cloud = init_gaussians(pts, normals, np.full(len(pts), 0.5))
        flat = FlatScene.from_cloud(cloud)
        tree = bvh_for_primitives(flat.means, flat.rots, flat.scales)
        # look straight down from 2 m: expected depth 2
        origins = np.tile([0.0, 0.0, 2.0], (9, 1))
        xy = np.stack(np.meshgrid([-1, 0, 1], [-1, 0, 1], indexing="ij"), -1).reshape(-1, 2)
        targets = np.column_stack([xy * 2.0, np.zeros(9)])
        dirs = targets - origins
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        res = trace_forward(flat, tree, origins, dirs, TraceConfig(near=0.1))
        expected = np.linalg.norm(targets - origins, axis=1)
        assert res.hit_mask.all()
        np.testing.assert_allclose(res.depth, expected, atol=0.3)

    def test_seeded_runs_identical(self, rng):
        pts = rng.uniform(-3, 3, (30, 3))
        normals = np.tile([0.0, 0.0, 1.0], (30, 1))
        a = init_gaussians(pts, normals)
        b = init_gaussians(pts, normals)
        np.testing.assert_array_equal(a.quats, b.quats)
        np.testing.assert_array_equal(a.log_scales, b.log_scales)


class TestPadding:
    def test_exact_count_unchanged(self, rng):
        pts = rng.uniform(-1, 1, (100, 3))
        out, intens = pad_object_points(pts, None, [4.0, 2.0, 2.0], 100, rng)
        np.testing.assert_array_equal(out, pts)

    def test_empty_cloud_filled_inside_box(self):
        rng = np.random.default_rng(3)
        box = np.array([4.0, 2.0, 2.0])
        out, _ = pad_object_points(np.zeros((0, 3)), None, box, 500, rng)
        assert len(out) == 500
        assert np.all(np.abs(out) <= box / 2)

    def test_partial_fill(self, rng):
        box = np.array([4.0, 2.0, 2.0])
        pts = rng.uniform(-0.5, 0.5, (5000, 3))
        out, _ = pad_object_points(pts, None, box, 8000, rng)
        assert len(out) == 8000
        fresh = out[5000:]
        assert np.all(np.abs(fresh) <= box / 2)

    def test_target_below_count_rejected(self, rng):
        with pytest.raises(ValueError):
            pad_object_points(rng.normal(size=(10, 3)), None, [1, 1, 1], 5, rng)

    def test_seeded_reproducible(self):
        box = [2.0, 2.0, 2.0]
        a, _ = pad_object_points(np.zeros((1, 3)), None, box, 50, np.random.default_rng(7))
        b, _ = pad_object_points(np.zeros((1, 3)), None, box, 50, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)
