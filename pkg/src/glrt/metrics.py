"""Quantitative evaluation of rendered LiDAR views against captures:
masked RMSE / MedAE / PSNR, windowed SSIM, point-cloud Chamfer distance
and F-score."""

from __future__ import annotations

import numpy as np

from .knn import build_grid, nearest_neighbors
from .optim import loss_cd

PSNR_INF = float("inf")


def _masked(render, gt, mask):
    render = np.asarray(render, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if render.shape != gt.shape:
        raise ValueError(f"shape mismatch {render.shape} vs {gt.shape}")
    if mask is None:
        mask = np.ones(render.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    return render[mask], gt[mask]


def rmse(render, gt, mask=None) -> float:
    a, b = _masked(render, gt, mask)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def medae(render, gt, mask=None) -> float:
    a, b = _masked(render, gt, mask)
    return float(np.median(np.abs(a - b)))


def psnr(render, gt, mask=None, peak: float = 1.0) -> float:
    a, b = _masked(render, gt, mask)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return float(10.0 * np.log10(peak * peak / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter2_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation with a 1D window on both axes."""
    size = len(win)
    h, w = img.shape
    tmp = np.zeros((h, w - size + 1))
    for i in range(size):
        tmp += win[i] * img[:, i : i + w - size + 1]
    out = np.zeros((h - size + 1, w - size + 1))
    for i in range(size):
        out += win[i] * tmp[i : i + h - size + 1, :]
    return out


def ssim(
    render,
    gt,
    dynamic_range: float | None = None,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean structural similarity with an 11x11 Gaussian window."""
    x = np.asarray(render, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError("ssim expects two equal-shape single-channel images")
    if min(x.shape) < window_size:
        raise ValueError(f"image {x.shape} smaller than the {window_size} window")
    if dynamic_range is None:
        dynamic_range = float(max(x.max(), y.max(), 1e-12))
    win = _gaussian_window(window_size, sigma)
    mu_x = _filter2_valid(x, win)
    mu_y = _filter2_valid(y, win)
    xx = _filter2_valid(x * x, win) - mu_x * mu_x
    yy = _filter2_valid(y * y, win) - mu_y * mu_y
    xy = _filter2_valid(x * y, win) - mu_x * mu_y
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def fscore(s_hat, s, tau: float = 0.05) -> float:
    """Harmonic mean of precision and recall at distance threshold tau."""
    s_hat = np.asarray(s_hat, dtype=np.float64).reshape(-1, 3)
    s = np.asarray(s, dtype=np.float64).reshape(-1, 3)
    if len(s_hat) == 0 or len(s) == 0:
        raise ValueError("F-score of an empty cloud is undefined")
    tau2 = tau * tau
    d2_p, _ = nearest_neighbors(build_grid(s, cell=max(tau, 1e-6)), s_hat)
    d2_r, _ = nearest_neighbors(build_grid(s_hat, cell=max(tau, 1e-6)), s)
    precision = float(np.mean(d2_p <= tau2))
    recall = float(np.mean(d2_r <= tau2))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def chamfer(s_hat, s) -> float:
    return float(loss_cd(s_hat, s))


def evaluate_view(render_img, gt_img, depth_peak: float) -> dict:
    """Per-view metric table; depth and intensity are scored on pixels with
    a captured return ('gt' masks) and on the union of captured and
    rendered returns ('union' masks)."""
    gt_mask = gt_img.hit
    union = gt_img.hit | render_img.hit
    out = {}
    for name, mask in (("gt", gt_mask), ("union", union)):
        out[f"depth_rmse_{name}"] = rmse(render_img.depth, gt_img.depth, mask)
        out[f"depth_medae_{name}"] = medae(render_img.depth, gt_img.depth, mask)
        out[f"depth_psnr_{name}"] = psnr(render_img.depth, gt_img.depth, mask, peak=depth_peak)
        out[f"intensity_rmse_{name}"] = rmse(render_img.intensity, gt_img.intensity, mask)
        out[f"intensity_medae_{name}"] = medae(render_img.intensity, gt_img.intensity, mask)
        out[f"intensity_psnr_{name}"] = psnr(render_img.intensity, gt_img.intensity, mask, peak=1.0)
    out["depth_ssim"] = ssim(render_img.depth, gt_img.depth, dynamic_range=depth_peak)
    out["intensity_ssim"] = ssim(render_img.intensity, gt_img.intensity, dynamic_range=1.0)
    return out
