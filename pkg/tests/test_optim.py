"""Losses, Adam, and adaptive density control."""

import numpy as np
import pytest

from glrt.gaussians import logit
from glrt.optim import (
    Adam,
    AdamState,
    DensifyConfig,
    LossWeights,
    ParamGroup,
    bce,
    densify_and_prune,
    loss_cd,
    loss_total,
    remap_adam_state,
    render_loss_gradients,
)
from glrt.tracer import RenderResult

from conftest import make_random_cloud


def brute_chamfer(a, b):
    d2 = np.sum((a[:, None] - b[None]) ** 2, axis=2)
    k = min(len(a), len(b))
    return (d2.min(axis=1).sum() + d2.min(axis=0).sum()) / k


class TestChamfer:
    def test_identical_clouds_zero(self, rng):
        pts = rng.uniform(-5, 5, (100, 3))
        assert loss_cd(pts, pts.copy()) == 0.0

    def test_single_point_pair(self):
        assert loss_cd(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]])) == pytest.approx(2.0)

    def test_grid_equals_brute_force(self, rng):
        a = rng.uniform(-4, 4, (500, 3))
        b = rng.uniform(-4, 4, (500, 3))
        np.testing.assert_allclose(loss_cd(a, b), brute_chamfer(a, b), rtol=0, atol=0)

    def test_symmetry(self, rng):
        a = rng.uniform(-4, 4, (180, 3))
        b = rng.uniform(-4, 4, (150, 3))
        assert abs(loss_cd(a, b) - loss_cd(b, a)) < 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            loss_cd(np.zeros((0, 3)), np.ones((3, 3)))

    def test_gradients_match_finite_differences(self, rng):
        a = rng.uniform(-2, 2, (40, 3))
        b = rng.uniform(-2, 2, (30, 3))
        _, g = loss_cd(a, b, return_grads=True)
        h = 1e-6
        for idx in [(0, 0), (5, 1), (20, 2), (39, 0)]:
            ap = a.copy()
            am = a.copy()
            ap[idx] += h
            am[idx] -= h
            fd = (loss_cd(ap, b) - loss_cd(am, b)) / (2 * h)
            np.testing.assert_allclose(g[idx], fd, rtol=1e-5, atol=1e-9)


def make_image(depth, intensity, raydrop, hit):
    from glrt.lidar import RangeImage

    depth = np.asarray(depth, dtype=np.float64)
    return RangeImage(
        depth=depth,
        intensity=np.asarray(intensity, dtype=np.float64),
        raydrop=np.asarray(raydrop, dtype=np.float64),
        acc_alpha=hit.astype(np.float64),
        hit=hit,
    )


class TestLossTotal:
    def test_identical_inputs(self, rng):
        depth = rng.uniform(1, 10, (4, 4))
        inten = rng.uniform(0, 1, (4, 4))
        hit = np.ones((4, 4), dtype=bool)
        drop_prob = np.full((4, 4), 0.2)
        render = make_image(depth, inten, drop_prob, hit)
        gt = make_image(depth, inten, 1.0 - hit, hit)
        rep = loss_total(render, gt, LossWeights())
        assert rep.depth == 0.0 and rep.intensity == 0.0 and rep.chamfer == 0.0
        # BCE stays positive unless the probabilities saturate
        assert rep.raydrop == pytest.approx(float(np.mean(bce(drop_prob, 0.0))))

    def test_all_weights_zero(self, rng):
        depth = rng.uniform(1, 10, (4, 4))
        hit = np.ones((4, 4), dtype=bool)
        zeros = LossWeights(0, 0, 0, 0)
        rep = loss_total(
            make_image(depth, depth, depth * 0, hit),
            make_image(depth + 1, depth, 1.0 - hit, hit),
            zeros,
        )
        assert rep.total == 0.0

    def test_hand_computed_toy(self):
        # 2x2 toy: gt hits on the left column only
        gt_hit = np.array([[True, False], [True, False]])
        gt = make_image(
            [[2.0, 0.0], [4.0, 0.0]], [[0.5, 0.0], [0.25, 0.0]], 1.0 - gt_hit, gt_hit
        )
        render = make_image(
            [[2.5, 1.0], [3.0, 1.0]],
            [[0.75, 0.2], [0.25, 0.2]],
            [[0.1, 0.9], [0.2, 0.6]],
            np.ones((2, 2), bool),
        )
        w = LossWeights(0.1, 0.1, 0.01, 0.0)
        rep = loss_total(render, gt, w)
        l_d = (0.5 + 1.0) / 2
        l_i = (0.25 + 0.0) / 2
        l_r = float(
            np.mean(
                [
                    -np.log(1 - 0.1),
                    -np.log(0.9),
                    -np.log(1 - 0.2),
                    -np.log(0.6),
                ]
            )
        )
        assert rep.depth == pytest.approx(l_d)
        assert rep.intensity == pytest.approx(l_i)
        assert rep.raydrop == pytest.approx(l_r)
        assert rep.total == pytest.approx(0.1 * l_d + 0.1 * l_i + 0.01 * l_r)

    def test_chamfer_term_included(self, rng):
        hit = np.ones((3, 3), dtype=bool)
        depth = rng.uniform(1, 5, (3, 3))
        img = make_image(depth, depth * 0.1, 1.0 - hit, hit)
        rep = loss_total(
            img, img, LossWeights(), np.array([[0.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]])
        )
        assert rep.chamfer == pytest.approx(2.0)
        assert rep.total == pytest.approx(0.01 * 2.0 + 0.01 * rep.raydrop, abs=1e-9)

    def test_shape_mismatch_rejected(self, rng):
        hit2 = np.ones((2, 2), bool)
        hit3 = np.ones((3, 3), bool)
        with pytest.raises(ValueError):
            loss_total(
                make_image(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)), hit2),
                make_image(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3)), hit3),
                LossWeights(),
            )


class TestLossGradients:
    def make_result(self, rng, n):
        acc = rng.uniform(0.3, 0.95, n)
        depth_n = rng.uniform(2, 20, n)
        int_n = rng.uniform(0.1, 0.9, n)
        ray_n = rng.uniform(0.1, 0.4, n)
        return RenderResult(
            depth_raw=depth_n * acc,
            intensity_raw=int_n * acc,
            raydrop_raw=ray_n * acc,
            acc_alpha=acc,
            t_final=1 - acc,
            n_contrib=np.ones(n, dtype=np.int64),
        )

    def loss_value(self, result, gt_depth, gt_int, gt_hit, w):
        rep, _ = render_loss_gradients(result, gt_depth, gt_int, gt_hit, w)
        return rep.total

    def test_upstream_matches_finite_differences(self, rng):
        n = 12
        res = self.make_result(rng, n)
        gt_depth = res.depth + rng.normal(scale=1.0, size=n)
        gt_int = np.clip(res.intensity + rng.normal(scale=0.1, size=n), 0, 1)
        gt_hit = rng.random(n) > 0.3
        w = LossWeights(0.1, 0.1, 0.01, 0.0)
        _, upstream = render_loss_gradients(res, gt_depth, gt_int, gt_hit, w)
        h = 1e-7
        raws = {
            0: res.depth_raw,
            1: res.intensity_raw,
            2: res.raydrop_raw,
            3: res.acc_alpha,
        }
        for col, arr in raws.items():
            for i in range(n):
                orig = arr[i]
                arr[i] = orig + h
                lp = self.loss_value(res, gt_depth, gt_int, gt_hit, w)
                arr[i] = orig - h
                lm = self.loss_value(res, gt_depth, gt_int, gt_hit, w)
                arr[i] = orig
                fd = (lp - lm) / (2 * h)
                np.testing.assert_allclose(
                    upstream[i, col], fd, rtol=1e-4, atol=1e-9,
                    err_msg=f"channel {col} ray {i}",
                )


class TestAdam:
    def groups(self):
        return {
            "w": ParamGroup("w", 0.1),
            "means": ParamGroup("means", 0.1, 0.001),
        }

    def test_step_one_closed_form(self):
        adam = Adam({"w": ParamGroup("w", 0.1)}, total_steps=10)
        params = {"w": np.array([1.0])}
        state = AdamState.for_params(params)
        adam.step(params, {"w": np.array([1.0])}, state)
        # bias-corrected m_hat/sqrt(v_hat) = 1 at step 1
        np.testing.assert_allclose(params["w"], [1.0 - 0.1], atol=1e-12)

    def test_zero_gradient_keeps_params(self):
        adam = Adam({"w": ParamGroup("w", 0.1)}, total_steps=10)
        params = {"w": np.array([3.0, -2.0])}
        state = AdamState.for_params(params)
        adam.step(params, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(params["w"], [3.0, -2.0])
        assert state.step == 1

    def test_nan_gradient_skipped(self, caplog):
        adam = Adam({"w": ParamGroup("w", 0.1)}, total_steps=10)
        params = {"w": np.array([3.0])}
        state = AdamState.for_params(params)
        with caplog.at_level("WARNING"):
            adam.step(params, {"w": np.array([np.nan])}, state)
        np.testing.assert_array_equal(params["w"], [3.0])
        assert "non-finite" in caplog.text

    def test_lr_decay_endpoints(self):
        adam = Adam(self.groups(), total_steps=100)
        assert adam.lr_at("means", 0) == pytest.approx(0.1)
        assert adam.lr_at("means", 100) == pytest.approx(0.001)
        assert adam.lr_at("means", 50) == pytest.approx(0.01)
        assert adam.lr_at("w", 77) == 0.1

    def test_identical_runs_bit_identical(self, rng):
        def run():
            adam = Adam(self.groups(), total_steps=50)
            params = {"w": np.ones(5), "means": np.zeros(5)}
            state = AdamState.for_params(params)
            g = np.random.default_rng(0)
            for _ in range(50):
                grads = {"w": g.normal(size=5), "means": g.normal(size=5)}
                adam.step(params, grads, state)
            return params

        a = run()
        b = run()
        np.testing.assert_array_equal(a["w"], b["w"])
        np.testing.assert_array_equal(a["means"], b["means"])


class TestDensify:
    def make_cloud(self, rng, n=10):
        cloud = make_random_cloud(rng, n, center=(0, 0, 0), spread=1.0)
        cloud.opacity_logits[:] = logit(0.5)
        return cloud

    def test_quiet_cloud_unchanged(self, rng):
        cloud = self.make_cloud(rng)
        cfg = DensifyConfig()
        out, res = densify_and_prune(cloud, np.zeros(10), cfg, rng)
        assert len(out) == 10
        assert res.n_cloned == res.n_split == res.n_pruned == 0
        np.testing.assert_array_equal(out.means, cloud.means)

    def test_split_adds_one_net(self, rng):
        cloud = self.make_cloud(rng, 5)
        cloud.log_scales[:] = np.log(0.2)  # above split threshold
        grads = np.zeros(5)
        grads[2] = 1.0
        out, res = densify_and_prune(cloud, grads, DensifyConfig(), rng)
        assert res.n_split == 1
        assert len(out) == 6
        # children shrink by the configured factor
        fresh = out.select(res.source_index == -1)
        np.testing.assert_allclose(fresh.log_scales, np.log(0.2) - np.log(1.6), atol=1e-12)

    def test_clone_small_scale(self, rng):
        cloud = self.make_cloud(rng, 5)
        cloud.log_scales[:] = np.log(0.01)  # below split threshold
        grads = np.zeros(5)
        grads[1] = 1.0
        out, res = densify_and_prune(cloud, grads, DensifyConfig(), rng)
        assert res.n_cloned == 1 and res.n_split == 0
        assert len(out) == 6

    def test_transparent_pruned(self, rng):
        cloud = self.make_cloud(rng, 6)
        cloud.opacity_logits[3] = logit(0.001)
        out, res = densify_and_prune(cloud, np.zeros(6), DensifyConfig(), rng)
        assert res.n_pruned == 1
        assert len(out) == 5

    def test_object_outside_box_pruned(self, rng):
        cloud = self.make_cloud(rng, 4)
        cloud.means[:] = 0.0
        cloud.means[2] = [5.0, 0.0, 0.0]
        box = np.array([4.0, 4.0, 4.0])  # inflated half-extent 2.2 < 5
        out, res = densify_and_prune(cloud, np.zeros(4), DensifyConfig(), rng, box_dims=box)
        assert res.n_pruned == 1
        assert len(out) == 3

    def test_background_never_box_pruned(self, rng):
        cloud = self.make_cloud(rng, 4)
        cloud.means[2] = [500.0, 0.0, 0.0]
        out, _ = densify_and_prune(cloud, np.zeros(4), DensifyConfig(), rng, box_dims=None)
        assert len(out) == 4

    def test_adam_state_follows_survivors(self, rng):
        cloud = self.make_cloud(rng, 6)
        cloud.opacity_logits[0] = logit(0.0001)
        params = {"x": np.arange(6, dtype=np.float64)}
        state = AdamState.for_params(params)
        state.m["x"][:] = np.arange(6)
        out, res = densify_and_prune(cloud, np.zeros(6), DensifyConfig(), rng)
        new_state = remap_adam_state(state, res.source_index)
        np.testing.assert_array_equal(new_state.m["x"], np.arange(1, 6))
