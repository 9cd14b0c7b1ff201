"""Shared fixtures and independent oracles.

The brute-force renderer here is the reference the tracer is checked
against: plain vectorized numpy, no BVH, no chunking — enumerate every
primitive, sort by depth, blend. It shares no code with the kernels."""

import numpy as np
import pytest

from glrt.gaussians import GaussianCloud, sigmoid
from glrt.sh import n_coeffs, sh_basis
from glrt.tracer import FlatScene


def make_random_cloud(rng, n, sh_degree=2, center=(20.0, 0.0, 0.0), spread=10.0,
                      scale_range=(0.2, 1.5), opacity_range=(-1.5, 1.5)):
    cloud = GaussianCloud.empty(n, sh_degree)
    cloud.means = np.asarray(center) + rng.uniform(-spread, spread, (n, 3))
    q = rng.normal(size=(n, 4))
    cloud.quats = q / np.linalg.norm(q, axis=1, keepdims=True)
    cloud.log_scales = rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]), (n, 2))
    cloud.opacity_logits = rng.uniform(*opacity_range, n)
    k = n_coeffs(sh_degree)
    cloud.sh_intensity = rng.normal(scale=0.4, size=(n, k))
    cloud.sh_raydrop = rng.normal(scale=0.4, size=(n, 2, k))
    return cloud


def make_rays_toward(rng, cloud, n_rays, origin=(0.0, 0.0, 0.0), jitter=1.0):
    origins = np.tile(np.asarray(origin, dtype=np.float64), (n_rays, 1))
    targets = cloud.means[rng.integers(0, len(cloud), n_rays)]
    targets = targets + rng.normal(scale=jitter, size=(n_rays, 3))
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return origins, dirs


def brute_force_render(flat: FlatScene, origins, dirs, chunk_cfg, cutoff=3.0):
    """Full-sort alpha blend over every primitive, one ray at a time."""
    means = flat.means
    rots = flat.rots
    scales = flat.scales
    opac = flat.opacities
    n_rays = len(origins)
    out = {
        "depth_raw": np.zeros(n_rays),
        "intensity_raw": np.zeros(n_rays),
        "raydrop_raw": np.zeros(n_rays),
        "acc_alpha": np.zeros(n_rays),
        "t_final": np.ones(n_rays),
        "n_contrib": np.zeros(n_rays, dtype=np.int64),
        "hits": [],
    }
    t_u = rots[:, :, 0]
    t_v = rots[:, :, 1]
    nrm = rots[:, :, 2]
    for r in range(n_rays):
        o, d = origins[r], dirs[r]
        denom = nrm @ d
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.einsum("ij,ij->i", means - o, nrm) / denom
        ok = (np.abs(denom) > 1e-12) & (t > chunk_cfg.near) & np.isfinite(t)
        h = o + t[:, None] * d - means
        u = np.einsum("ij,ij->i", h, t_u) / scales[:, 0]
        v = np.einsum("ij,ij->i", h, t_v) / scales[:, 1]
        ok &= (np.abs(u) <= cutoff) & (np.abs(v) <= cutoff)
        alpha = np.minimum(opac * np.exp(-0.5 * (u**2 + v**2)), chunk_cfg.alpha_max)
        ok &= alpha >= chunk_cfg.alpha_min
        idx = np.flatnonzero(ok)
        order = idx[np.lexsort((idx, t[idx]))]
        trans = 1.0
        hits = []
        for p in order:
            view = means[p] - o
            view = view / np.linalg.norm(view)
            ds = flat.frame_rot[flat.owner_frame[p]] @ view
            basis = sh_basis(ds, flat.sh_degree)
            zeta = float(sigmoid(flat.sh_intensity[p] @ basis))
            bd = flat.sh_drop[p] @ basis
            bh = flat.sh_hit[p] @ basis
            m = max(bd, bh)
            beta = np.exp(bd - m) / (np.exp(bd - m) + np.exp(bh - m))
            w = trans * alpha[p]
            out["depth_raw"][r] += w * t[p]
            out["intensity_raw"][r] += w * zeta
            out["raydrop_raw"][r] += w * beta
            out["acc_alpha"][r] += w
            out["n_contrib"][r] += 1
            hits.append((t[p], int(p)))
            trans *= 1.0 - alpha[p]
            if trans < chunk_cfg.t_min:
                break
        out["t_final"][r] = trans
        out["hits"].append(hits)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
