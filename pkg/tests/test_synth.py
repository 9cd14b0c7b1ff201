"""Analytic scene generator: closed-form depths, slab-test oracle for
boxes, refinement consistency, and seeded ray-drop reproducibility."""

import numpy as np
import pytest

from glrt.lidar import generate_rays
from glrt.synth import build_scene, generate_dataset, raycast_frame, raycast_gt

GROUND = {"type": "plane", "point": [0, 0, 0], "normal": [0, 0, 1], "intensity": 0.6}


def spec(bodies, beams=16, steps=64, frames=1, sensor_z=1.5, **kw):
    return {
        "bodies": bodies,
        "frames": frames,
        "lidar": {
            "beams": beams,
            "steps": steps,
            "fov_up_deg": 2.0,
            "fov_down_deg": -25.0,
            "near": 0.2,
            "far": 60.0,
        },
        "sensor": {"kind": "static", "position": [0.0, 0.0, sensor_z]},
        **kw,
    }


class TestPlane:
    def test_empty_scene_all_dropped(self):
        scene = build_scene(spec([]))
        img, body = raycast_frame(scene, 0)
        assert not img.hit.any()
        np.testing.assert_array_equal(img.raydrop, 1.0)
        np.testing.assert_array_equal(body, -1)

    def test_ground_plane_closed_form(self):
        scene = build_scene(spec([GROUND], sensor_z=1.5))
        img, _ = raycast_frame(scene, 0)
        _, dirs = generate_rays(scene.lidar, 0)
        sin_phi = dirs[:, 2].reshape(img.shape)
        expected = np.where(sin_phi < 0, 1.5 / -sin_phi, np.inf)
        valid = (expected >= 0.2) & (expected <= 60.0)
        np.testing.assert_array_equal(img.hit, valid)
        np.testing.assert_allclose(img.depth[valid], expected[valid], atol=1e-9)

    def test_cos_incidence_shading(self):
        scene = build_scene(spec([GROUND], cos_incidence=True))
        img, _ = raycast_frame(scene, 0)
        _, dirs = generate_rays(scene.lidar, 0)
        cosg = np.abs(dirs[:, 2]).reshape(img.shape)
        expected = 0.6 * np.clip(cosg, 0.05, 1.0)
        np.testing.assert_allclose(img.intensity[img.hit], expected[img.hit], atol=1e-12)


class TestBox:
    def box_spec(self, center=(8.0, 0.0, 1.0), dims=(2.0, 2.0, 2.0)):
        return {"type": "box", "center": list(center), "dims": list(dims), "intensity": 0.9}

    def test_box_depth_matches_slab_oracle(self, rng):
        scene = build_scene(spec([self.box_spec()], beams=32, steps=128))
        img, body = raycast_frame(scene, 0)
        origins, dirs = generate_rays(scene.lidar, 0)
        center = np.array([8.0, 0.0, 1.0])
        half = np.array([1.0, 1.0, 1.0])
        # independent slab test
        lo = (center - half - origins) / dirs
        hi = (center + half - origins) / dirs
        tn = np.minimum(lo, hi).max(axis=1)
        tf = np.maximum(lo, hi).min(axis=1)
        hit = (tn <= tf) & (tn > 0.2) & (tn <= 60.0)
        np.testing.assert_array_equal(img.hit.reshape(-1), hit)
        np.testing.assert_allclose(img.depth.reshape(-1)[hit], tn[hit], atol=1e-9)

    def test_moving_box_becomes_object(self):
        body = self.box_spec()
        body["motion"] = {"kind": "linear", "start": [8.0, -4.0, 1.0], "end": [8.0, 4.0, 1.0]}
        body["id"] = "mover"
        scene = build_scene(spec([GROUND, body], frames=5))
        assert [b.object_id for b in scene.objects()] == ["mover"]
        img0, _ = raycast_frame(scene, 0)
        img4, _ = raycast_frame(scene, 4)
        assert not np.array_equal(img0.depth, img4.depth)
        _, _, masks = raycast_gt(scene, 2)
        assert masks["mover"].any()

    def test_sphere_hits_at_radius(self):
        sphere = {"type": "sphere", "center": [6.0, 0.0, 1.5], "radius": 1.0, "intensity": 0.8}
        scene = build_scene(spec([sphere], beams=32, steps=128))
        img, _ = raycast_frame(scene, 0)
        assert img.hit.any()
        # closest return is center distance minus radius, along the axis ray
        d_min = img.depth[img.hit].min()
        np.testing.assert_allclose(d_min, 5.0, atol=2e-2)


class TestConsistency:
    def test_doubling_w_preserves_shared_azimuths(self):
        # steps 2W: odd columns reproduce the W-column azimuth grid exactly
        base = build_scene(spec([GROUND], steps=64))
        fine = build_scene(spec([GROUND], steps=128))
        img_b, _ = raycast_frame(base, 0)
        img_f, _ = raycast_frame(fine, 0)
        np.testing.assert_allclose(img_f.depth[:, 1::2], img_b.depth, atol=1e-9)

    def test_seeded_drop_mask_reproducible(self):
        drop = dict(GROUND, drop_prob=0.3)
        scene_a = build_scene(spec([drop], seed=5))
        scene_b = build_scene(spec([drop], seed=5))
        img_a, _ = raycast_frame(scene_a, 0)
        img_b, _ = raycast_frame(scene_b, 0)
        np.testing.assert_array_equal(img_a.raydrop, img_b.raydrop)
        scene_c = build_scene(spec([drop], seed=6))
        img_c, _ = raycast_frame(scene_c, 0)
        assert not np.array_equal(img_a.raydrop, img_c.raydrop)
        geom, _ = raycast_frame(build_scene(spec([GROUND])), 0)
        dropped_frac = 1.0 - img_a.hit[geom.hit].mean()
        assert 0.15 < dropped_frac < 0.45

    def test_gt_points_satisfy_plane_equation(self):
        scene = build_scene(spec([GROUND]))
        _, (points, _), _ = raycast_gt(scene, 0)
        np.testing.assert_allclose(points[:, 2], 0.0, atol=1e-9)


class TestDataset:
    def test_generate_dataset_layout(self, tmp_path):
        body = {"type": "box", "center": [8, 0, 1], "dims": [2, 2, 2], "intensity": 0.9,
                "motion": {"kind": "linear", "start": [8, -2, 1], "end": [8, 2, 1]}, "id": "m"}
        scene = build_scene(spec([GROUND, body], frames=3))
        out = generate_dataset(scene, tmp_path / "cap")
        assert (out / "scene.json").exists()
        assert (out / "frames" / "frame_0002.pfm").exists()
        from glrt.scenegraph import load_manifest

        manifest = load_manifest(out)
        assert len(manifest.frames) == 3
        assert manifest.objects[0]["id"] == "m"
        assert len(manifest.objects[0]["track"]) == 3

    def test_bad_body_type_rejected(self):
        with pytest.raises(ValueError, match="unknown body"):
            build_scene(spec([{"type": "torus"}]))
