"""Proxy geometry and BVH traversal against the linear-scan oracle."""

import numpy as np
import pytest

from glrt.bvh import (
    build_bvh,
    build_proxy_triangles,
    bvh_for_primitives,
    linear_scan_hits,
    next_hits,
)
from glrt.geom import quat_to_rotmat

from conftest import make_random_cloud


def quad_corners(tris, i):
    """Unique corner set of primitive i's two triangles."""
    pts = np.vstack(
        [tris[0][2 * i], tris[1][2 * i], tris[2][2 * i], tris[0][2 * i + 1], tris[1][2 * i + 1], tris[2][2 * i + 1]]
    )
    return np.unique(np.round(pts, 12), axis=0)


class TestProxy:
    def test_axis_aligned_unit_quad(self):
        means = np.zeros((1, 3))
        rot = np.eye(3)[None]
        scales = np.ones((1, 2))
        tris = build_proxy_triangles(means, rot, scales, cutoff=3.0)
        corners = quad_corners(tris, 0)
        expected = np.array(
            [[-3.0, -3.0, 0.0], [-3.0, 3.0, 0.0], [3.0, -3.0, 0.0], [3.0, 3.0, 0.0]]
        )
        np.testing.assert_allclose(np.sort(corners, axis=0), np.sort(expected, axis=0), atol=1e-12)

    def test_triangle_normals_parallel_to_disk_normal(self, rng):
        cloud = make_random_cloud(rng, 30)
        rots = cloud.rotations()
        v0, v1, v2, _, pn, _ = build_proxy_triangles(cloud.means, rots, cloud.scales)
        for t in range(len(v0)):
            n = np.cross(v1[t] - v0[t], v2[t] - v0[t])
            n /= np.linalg.norm(n)
            assert min(np.linalg.norm(n - pn[t]), np.linalg.norm(n + pn[t])) < 1e-9

    def test_three_sigma_ellipse_inside_quad(self, rng):
        cloud = make_random_cloud(rng, 10)
        rots = cloud.rotations()
        scales = cloud.scales
        ang = np.linspace(0, 2 * np.pi, 360, endpoint=False)
        for i in range(10):
            boundary = (
                cloud.means[i]
                + 3.0 * scales[i, 0] * np.cos(ang)[:, None] * rots[i][:, 0]
                + 3.0 * scales[i, 1] * np.sin(ang)[:, None] * rots[i][:, 1]
            )
            # in disk-local cutoff units every boundary point must be in the box
            local = boundary - cloud.means[i]
            u = local @ rots[i][:, 0] / scales[i, 0]
            v = local @ rots[i][:, 1] / scales[i, 1]
            assert np.all(np.abs(u) <= 3.0 + 1e-9)
            assert np.all(np.abs(v) <= 3.0 + 1e-9)


class TestBvhBuild:
    def test_single_triangle_single_leaf(self):
        v0 = np.array([[0.0, 0.0, 0.0]])
        v1 = np.array([[1.0, 0.0, 0.0]])
        v2 = np.array([[0.0, 1.0, 0.0]])
        pn = np.array([[0.0, 0.0, 1.0]])
        tree = build_bvh(v0, v1, v2, v0, pn, np.array([0]))
        assert tree.n_nodes == 1
        assert tree.node_count[0] == 1

    def test_node_count_bound(self, rng):
        cloud = make_random_cloud(rng, 500)
        tree = bvh_for_primitives(cloud.means, cloud.rotations(), cloud.scales)
        assert tree.n_nodes <= 2 * tree.n_triangles - 1

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="zero triangles"):
            build_bvh(
                np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)),
                np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64),
            )

    def test_leaves_contain_their_triangles(self, rng):
        cloud = make_random_cloud(rng, 200)
        tree = bvh_for_primitives(cloud.means, cloud.rotations(), cloud.scales)
        for node in range(tree.n_nodes):
            if tree.node_count[node] > 0:
                s = tree.node_start[node]
                e = s + tree.node_count[node]
                for arr in (tree.tri_v0, tree.tri_v1, tree.tri_v2):
                    assert np.all(arr[s:e] >= tree.node_min[node] - 1e-12)
                    assert np.all(arr[s:e] <= tree.node_max[node] + 1e-12)

    def test_parents_contain_children(self, rng):
        cloud = make_random_cloud(rng, 200)
        tree = bvh_for_primitives(cloud.means, cloud.rotations(), cloud.scales)
        for node in range(tree.n_nodes):
            if tree.node_count[node] == 0:
                for child in (tree.node_left[node], tree.node_right[node]):
                    assert np.all(tree.node_min[child] >= tree.node_min[node] - 1e-12)
                    assert np.all(tree.node_max[child] <= tree.node_max[node] + 1e-12)


def collect_chunked(tree, o, d, t_start, chunk):
    ts, idx = [], []
    cur_t, cur_i = t_start, 1 << 62  # strict t > t_start on the first call
    while True:
        ht, hi = next_hits(tree, o, d, cur_t, chunk, idx_start=cur_i)
        ts.extend(ht)
        idx.extend(hi)
        if len(ht) < chunk:
            return np.array(ts), np.array(idx, dtype=np.int64)
        cur_t, cur_i = ht[-1], hi[-1]


class TestTraversal:
    def test_miss_is_empty(self):
        cloud = make_random_cloud(np.random.default_rng(0), 20)
        tree = bvh_for_primitives(cloud.means, cloud.rotations(), cloud.scales)
        ht, hi = next_hits(tree, np.zeros(3), np.array([-1.0, 0.0, 0.0]), 0.0, 8)
        assert len(ht) == 0 and len(hi) == 0

    def test_single_quad_center_hit(self):
        means = np.array([[5.0, 0.0, 0.0]])
        rot = quat_to_rotmat(np.array([[np.cos(np.pi / 4), 0.0, np.sin(np.pi / 4), 0.0]]))
        scales = np.ones((1, 2))
        tree = bvh_for_primitives(means, rot, scales)
        ht, hi = next_hits(tree, np.zeros(3), np.array([1.0, 0.0, 0.0]), 0.0, 4)
        assert len(ht) == 1
        np.testing.assert_allclose(ht[0], 5.0, atol=1e-12)
        assert hi[0] == 0

    def test_stacked_quads_resume(self):
        means = np.array([[5.0, 0, 0], [6.0, 0, 0], [7.0, 0, 0]])
        q = np.array([np.cos(np.pi / 4), 0.0, np.sin(np.pi / 4), 0.0])
        rot = quat_to_rotmat(np.tile(q, (3, 1)))
        tree = bvh_for_primitives(means, rot, np.ones((3, 2)))
        o, d = np.zeros(3), np.array([1.0, 0.0, 0.0])
        ht, hi = next_hits(tree, o, d, 0.0, 2)
        np.testing.assert_allclose(ht, [5.0, 6.0], atol=1e-12)
        ht2, hi2 = next_hits(tree, o, d, ht[-1], 2, idx_start=hi[-1])
        np.testing.assert_allclose(ht2, [7.0], atol=1e-12)

    def test_coplanar_tie_broken_by_index(self):
        # two primitives in the same plane pierced through the overlap
        means = np.array([[5.0, 0.3, 0.0], [5.0, -0.3, 0.0]])
        q = np.array([np.cos(np.pi / 4), 0.0, np.sin(np.pi / 4), 0.0])
        rot = quat_to_rotmat(np.tile(q, (2, 1)))
        tree = bvh_for_primitives(means, rot, np.ones((2, 2)))
        o, d = np.zeros(3), np.array([1.0, 0.0, 0.0])
        ht, hi = collect_chunked(tree, o, d, 0.0, 1)  # chunk 1 forces resume on the tie
        np.testing.assert_allclose(ht, [5.0, 5.0], atol=0)
        np.testing.assert_array_equal(hi, [0, 1])

    @pytest.mark.parametrize("chunk", [1, 3, 16, 128])
    def test_matches_linear_scan_random(self, rng, chunk):
        cloud = make_random_cloud(rng, 400)
        rots = cloud.rotations()
        tris = build_proxy_triangles(cloud.means, rots, cloud.scales)
        tree = bvh_for_primitives(cloud.means, rots, cloud.scales)
        for _ in range(40):
            d = rng.normal(size=3)
            d[0] = abs(d[0]) + 0.3
            d /= np.linalg.norm(d)
            o = rng.normal(scale=2.0, size=3)
            lt, li = linear_scan_hits(tris, o, d, 0.0, idx_start=1 << 62)
            ct, ci = collect_chunked(tree, o, d, 0.0, chunk)
            np.testing.assert_array_equal(ci, li)
            np.testing.assert_array_equal(ct, lt)

    def test_deterministic_across_runs(self, rng):
        cloud = make_random_cloud(rng, 300)
        tree1 = bvh_for_primitives(cloud.means, cloud.rotations(), cloud.scales)
        tree2 = bvh_for_primitives(cloud.means, cloud.rotations(), cloud.scales)
        np.testing.assert_array_equal(tree1.tri_prim, tree2.tri_prim)
        o = np.zeros(3)
        d = np.array([1.0, 0.02, 0.01])
        d /= np.linalg.norm(d)
        t1, i1 = collect_chunked(tree1, o, d, 0.0, 5)
        t2, i2 = collect_chunked(tree2, o, d, 0.0, 5)
        np.testing.assert_array_equal(t1, t2)
        np.testing.assert_array_equal(i1, i2)

    def test_generic_triangle_soup_vs_linear_scan(self, rng):
        # raw triangles (not quads): traversal must agree with brute force
        n = 3000
        base = rng.uniform(-10, 10, (n, 3))
        v0 = base
        v1 = base + rng.normal(scale=0.8, size=(n, 3))
        v2 = base + rng.normal(scale=0.8, size=(n, 3))
        e1 = v1 - v0
        e2 = v2 - v0
        pn = np.cross(e1, e2)
        norms = np.linalg.norm(pn, axis=1, keepdims=True)
        keep = norms[:, 0] > 1e-9
        v0, v1, v2, pn = v0[keep], v1[keep], v2[keep], pn[keep] / norms[keep]
        prim = np.arange(len(v0), dtype=np.int64)
        tris = (v0, v1, v2, v0, pn, prim)
        tree = build_bvh(*tris)
        for _ in range(50):
            o = rng.uniform(-12, -10, 3)
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            lt, li = linear_scan_hits(tris, o, d, 0.0, idx_start=1 << 62)
            ct, ci = collect_chunked(tree, o, d, 0.0, 8)
            np.testing.assert_array_equal(ci, li)
            np.testing.assert_array_equal(ct, lt)
