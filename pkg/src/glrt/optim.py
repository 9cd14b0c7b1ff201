"""Scene fitting: the composite loss, its gradients with respect to the
rendered channels, bias-corrected Adam, and adaptive density control.

The total loss is w_depth * L1(depth) + w_intensity * L1(intensity) +
w_raydrop * BCE(no-return probability vs the captured drop mask) +
w_chamfer * CD(rendered cloud, captured cloud). Depth and intensity are
alpha-normalized and masked to pixels with a captured return; ray-drop is
scored on every pixel; the Chamfer term uses squared distances normalized
by min(|S_hat|, |S|).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .knn import build_grid, nearest_neighbors
from .tracer import RenderResult

log = logging.getLogger(__name__)

_P_EPS = 1e-7  # BCE probability clamp


@dataclass
class LossWeights:
    depth: float = 0.1
    intensity: float = 0.1
    raydrop: float = 0.01
    chamfer: float = 0.01

    def __post_init__(self):
        if min(self.depth, self.intensity, self.raydrop, self.chamfer) < 0:
            raise ValueError("loss weights must be non-negative")


def loss_cd(s_hat, s, cell: float = 0.5, return_grads: bool = False):
    """Symmetric squared-distance Chamfer loss between two clouds,
    normalized by the smaller cloud size. Optionally also returns the
    gradient with respect to the rendered points s_hat (nearest-neighbor
    assignments treated as fixed)."""
    s_hat = np.asarray(s_hat, dtype=np.float64).reshape(-1, 3)
    s = np.asarray(s, dtype=np.float64).reshape(-1, 3)
    if len(s_hat) == 0 or len(s) == 0:
        raise ValueError("Chamfer distance of an empty cloud is undefined")
    k = min(len(s_hat), len(s))
    grid_s = build_grid(s, cell)
    d2_fwd, idx_fwd = nearest_neighbors(grid_s, s_hat)
    grid_hat = build_grid(s_hat, cell)
    d2_bwd, idx_bwd = nearest_neighbors(grid_hat, s)
    value = (d2_fwd.sum() + d2_bwd.sum()) / k
    if not return_grads:
        return value
    grads = 2.0 * (s_hat - s[idx_fwd]) / k
    np.add.at(grads, idx_bwd, 2.0 * (s_hat[idx_bwd] - s) / k)
    return value, grads


def bce(p, y):
    p = np.clip(p, _P_EPS, 1.0 - _P_EPS)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


@dataclass
class LossReport:
    total: float
    depth: float
    intensity: float
    raydrop: float
    chamfer: float

    def as_dict(self):
        return {
            "total": self.total,
            "depth": self.depth,
            "intensity": self.intensity,
            "raydrop": self.raydrop,
            "chamfer": self.chamfer,
        }


def loss_total(
    render,
    gt,
    weights: LossWeights,
    rendered_cloud=None,
    gt_cloud=None,
) -> LossReport:
    """Composite loss over one view, from RangeImage pairs.

    Depth and intensity are L1 over pixels with a captured return; the
    ray-drop term is BCE of the rendered no-return probability against the
    captured drop mask over every pixel; the Chamfer term compares the
    provided clouds."""
    if render.shape != gt.shape:
        raise ValueError(f"render/gt shapes differ: {render.shape} vs {gt.shape}")
    m = gt.hit.reshape(-1)
    n_m = max(int(m.sum()), 1)
    l_d = float(np.abs(render.depth.reshape(-1)[m] - gt.depth.reshape(-1)[m]).sum() / n_m)
    l_i = float(
        np.abs(render.intensity.reshape(-1)[m] - gt.intensity.reshape(-1)[m]).sum() / n_m
    )
    drop_target = 1.0 - gt.hit.astype(np.float64)
    l_r = float(np.mean(bce(render.raydrop, drop_target)))
    l_cd = 0.0
    if weights.chamfer > 0 and rendered_cloud is not None and gt_cloud is not None:
        l_cd = float(loss_cd(rendered_cloud, gt_cloud))
    total = weights.depth * l_d + weights.intensity * l_i + weights.raydrop * l_r + weights.chamfer * l_cd
    return LossReport(total, l_d, l_i, l_r, l_cd)


def render_loss_gradients(
    result: RenderResult,
    gt_depth,
    gt_intensity,
    gt_hit,
    weights: LossWeights,
    ray_dirs=None,
    cloud_grads=None,
    cloud_pixels=None,
) -> tuple[LossReport, np.ndarray]:
    """Loss value plus upstream gradients for trace_backward.

    Returns (report, upstream (n_rays, 4)) with upstream columns
    [dL/d depth_raw, dL/d intensity_raw, dL/d raydrop_raw, dL/d acc_alpha].
    Depth and intensity L1 terms apply on alpha-normalized channels over
    pixels with a captured return that the render also hit; the BCE term
    applies to the no-return probability on every pixel. Chamfer gradients
    per rendered point (from loss_cd) chain through depth via the ray
    directions when cloud_grads/cloud_pixels are given.
    """
    gt_depth = np.asarray(gt_depth, dtype=np.float64).reshape(-1)
    gt_intensity = np.asarray(gt_intensity, dtype=np.float64).reshape(-1)
    gt_hit = np.asarray(gt_hit, dtype=bool).reshape(-1)
    n = len(gt_depth)
    acc = result.acc_alpha
    hit = result.hit_mask
    m = gt_hit & hit
    n_m = max(int(gt_hit.sum()), 1)

    upstream = np.zeros((n, 4))
    depth_n = result.depth
    int_n = result.intensity

    # L1 terms on normalized channels: d(raw/acc)/draw = 1/acc,
    # d(raw/acc)/dacc = -raw/acc^2
    sgn_d = np.sign(depth_n - gt_depth) * m
    sgn_i = np.sign(int_n - gt_intensity) * m
    inv_acc = np.zeros(n)
    inv_acc[hit] = 1.0 / acc[hit]
    coef_d = weights.depth * sgn_d / n_m
    coef_i = weights.intensity * sgn_i / n_m
    upstream[:, 0] += coef_d * inv_acc
    upstream[:, 1] += coef_i * inv_acc
    upstream[:, 3] += -(coef_d * depth_n + coef_i * int_n) * inv_acc

    # BCE on the no-return probability p = raydrop_raw + (1 - acc)
    p = np.clip(result.no_return_prob, _P_EPS, 1.0 - _P_EPS)
    y = 1.0 - gt_hit.astype(np.float64)
    in_range = (result.no_return_prob > _P_EPS) & (result.no_return_prob < 1.0 - _P_EPS)
    dbce = weights.raydrop * (p - y) / (p * (1.0 - p)) / n * in_range
    upstream[:, 2] += dbce
    upstream[:, 3] += -dbce

    l_d = float(np.sum(np.abs(depth_n - gt_depth) * m) / n_m)
    l_i = float(np.sum(np.abs(int_n - gt_intensity) * m) / n_m)
    l_r = float(np.mean(bce(result.no_return_prob, y)))
    l_cd = 0.0
    if cloud_grads is not None and cloud_pixels is not None and len(cloud_pixels):
        if ray_dirs is None:
            raise ValueError("cloud gradients need the ray directions")
        l_cd, point_grads = cloud_grads
        # p = o + depth_norm * d  =>  dL/d depth_norm = g . d
        g_depth_n = np.einsum("ij,ij->i", point_grads, ray_dirs[cloud_pixels])
        w = weights.chamfer * g_depth_n
        upstream[cloud_pixels, 0] += w * inv_acc[cloud_pixels]
        upstream[cloud_pixels, 3] += -w * depth_n[cloud_pixels] * inv_acc[cloud_pixels]
    total = (
        weights.depth * l_d
        + weights.intensity * l_i
        + weights.raydrop * l_r
        + weights.chamfer * l_cd
    )
    return LossReport(total, l_d, l_i, l_r, l_cd), upstream


# -- Adam ---------------------------------------------------------------------


@dataclass
class ParamGroup:
    name: str
    lr: float
    lr_final: float | None = None  # exponential decay target, else constant


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


@dataclass
class Adam:
    """Standard bias-corrected Adam over named parameter groups; the
    position group decays exponentially from lr to lr_final over
    total_steps. NaN gradients skip the parameter with a warning."""

    groups: dict[str, ParamGroup]
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    def lr_at(self, name: str, step: int) -> float:
        g = self.groups[name]
        if g.lr_final is None:
            return g.lr
        frac = min(max(step / max(self.total_steps, 1), 0.0), 1.0)
        return float(g.lr * (g.lr_final / g.lr) ** frac)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
        state.step += 1
        t = state.step
        for name, p in params.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                log.warning("skipping %s update at step %d: non-finite gradient", name, t)
                continue
            m = state.m[name]
            v = state.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p -= self.lr_at(name, t) * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


# -- densification ------------------------------------------------------------


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4  # mean world-space position-grad norm
    opacity_threshold: float = 0.005
    split_scale: float = 0.05  # max extent above which split, else clone
    split_shrink: float = 1.6
    start_step: int = 500
    stop_step: int = 15000
    interval: int = 100
    box_inflate: float = 1.1


@dataclass
class DensifyResult:
    """Index map from new primitives to their source (-1 means freshly
    sampled split child), so optimizer state can follow the survivors."""

    source_index: np.ndarray
    n_cloned: int
    n_split: int
    n_pruned: int


def densify_and_prune(
    cloud,
    mean_grad_norms: np.ndarray,
    config: DensifyConfig,
    rng: np.random.Generator,
    box_dims: np.ndarray | None = None,
):
    """Clone/split primitives with large accumulated world-space position
    gradients, prune transparent ones, and (for objects) prune primitives
    whose means left the inflated bounding box. Returns (cloud, result)."""
    n = len(cloud)
    mean_grad_norms = np.asarray(mean_grad_norms, dtype=np.float64).reshape(n)
    opacities = cloud.opacities
    keep = opacities >= config.opacity_threshold
    if box_dims is not None:
        half = np.asarray(box_dims, dtype=np.float64) * 0.5 * config.box_inflate
        inside = np.all(np.abs(cloud.means) <= half, axis=1)
        keep &= inside
    hot = (mean_grad_norms > config.grad_threshold) & keep
    scales = cloud.scales
    split = hot & (scales.max(axis=1) > config.split_scale)
    clone = hot & ~split

    survivors = np.flatnonzero(keep)
    clones = np.flatnonzero(clone)
    splits = np.flatnonzero(split)

    parts = [cloud.select(survivors)]
    source = [survivors]
    if len(clones):
        parts.append(cloud.select(clones))
        source.append(clones)
    if len(splits):
        # parent replaced by two children sampled from its own density
        twice = np.repeat(splits, 2)
        children = cloud.select(twice)
        rot = cloud.rotations()[twice]
        s = scales[twice]
        local = rng.normal(size=(len(twice), 2)) * s
        offset = rot[:, :, 0] * local[:, 0:1] + rot[:, :, 1] * local[:, 1:2]
        children.means = children.means + offset
        children.log_scales = children.log_scales - np.log(config.split_shrink)
        parts.append(children)
        source.append(np.full(2 * len(splits), -1, dtype=np.int64))
        # drop the split parents from the survivor block
        parent_mask = np.ones(n, dtype=bool)
        parent_mask[splits] = False
        keep_rows = parent_mask[survivors]
        parts[0] = parts[0].select(keep_rows)
        source[0] = survivors[keep_rows]

    from .gaussians import GaussianCloud  # local import to avoid cycle at module load

    new_cloud = GaussianCloud.concatenate(parts)
    result = DensifyResult(
        source_index=np.concatenate(source),
        n_cloned=len(clones),
        n_split=len(splits),
        n_pruned=int(n - keep.sum()),
    )
    return new_cloud, result


def remap_adam_state(state: AdamState, source_index: np.ndarray) -> AdamState:
    """Carry moments along the densification index map; fresh primitives
    start from zero moments."""
    new_m = {}
    new_v = {}
    for key, m in state.m.items():
        v = state.v[key]
        nm = np.zeros((len(source_index),) + m.shape[1:], dtype=m.dtype)
        nv = np.zeros_like(nm)
        old = source_index >= 0
        nm[old] = m[source_index[old]]
        nv[old] = v[source_index[old]]
        new_m[key] = nm
        new_v[key] = nv
    return AdamState(new_m, new_v, state.step)
