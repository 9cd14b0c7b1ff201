"""Planar Gaussian primitive sets and their learnable attributes.

A primitive is an oriented elliptical disk: a mean position, a unit
quaternion whose rotation columns give the two tangent axes and the disk
normal, per-axis extents stored as log-scales, an opacity logit, and SH
coefficient sets for intensity plus a (drop, hit) pair of ray-drop logits.
Sets are stored struct-of-arrays so the render kernels can consume them
directly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import sh
from .geom import normalize_quats, quat_to_rotmat

CONTAINER_MAGIC = b"GLRT"
CONTAINER_VERSION = 1

DEFAULT_SH_DEGREE = 2

# clamps shared by forward and backward passes
ALPHA_MAX = 0.9999
ALPHA_MIN = 1.0 / 255.0
SCALE_MIN = 1e-6  # meters; degenerate disks are clamped, not dropped


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def raydrop_prob(beta_drop, beta_hit):
    """Two-logit softmax drop probability, stable under large logits."""
    beta_drop = np.asarray(beta_drop, dtype=np.float64)
    beta_hit = np.asarray(beta_hit, dtype=np.float64)
    if np.any(~np.isfinite(beta_drop)) or np.any(~np.isfinite(beta_hit)):
        raise ValueError("ray-drop logits must be finite")
    m = np.maximum(beta_drop, beta_hit)
    ed = np.exp(beta_drop - m)
    eh = np.exp(beta_hit - m)
    return ed / (ed + eh)


@dataclass
class GaussianCloud:
    """A set of N planar Gaussian primitives (struct-of-arrays).

    means        (N, 3) float64
    quats        (N, 4) float64, unit (w, x, y, z)
    log_scales   (N, 2) float64, log extents along the tangent axes
    opacity_logits (N,) float64
    sh_intensity (N, K) float64, K = (sh_degree+1)^2
    sh_raydrop   (N, 2, K) float64, channel 0 = drop logit, 1 = hit logit
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_intensity: np.ndarray
    sh_raydrop: np.ndarray
    sh_degree: int = field(default=DEFAULT_SH_DEGREE)

    def __post_init__(self):
        n = len(self.means)
        k = sh.n_coeffs(self.sh_degree)
        self.means = np.ascontiguousarray(self.means, dtype=np.float64).reshape(n, 3)
        self.quats = np.ascontiguousarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64).reshape(n, 2)
        self.opacity_logits = np.ascontiguousarray(
            self.opacity_logits, dtype=np.float64
        ).reshape(n)
        self.sh_intensity = np.ascontiguousarray(
            self.sh_intensity, dtype=np.float64
        ).reshape(n, k)
        self.sh_raydrop = np.ascontiguousarray(self.sh_raydrop, dtype=np.float64).reshape(
            n, 2, k
        )

    def __len__(self) -> int:
        return len(self.means)

    @classmethod
    def empty(cls, n: int, sh_degree: int = DEFAULT_SH_DEGREE) -> "GaussianCloud":
        k = sh.n_coeffs(sh_degree)
        return cls(
            means=np.zeros((n, 3)),
            quats=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1)),
            log_scales=np.zeros((n, 2)),
            opacity_logits=np.zeros(n),
            sh_intensity=np.zeros((n, k)),
            sh_raydrop=np.zeros((n, 2, k)),
            sh_degree=sh_degree,
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.means.copy(),
            self.quats.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.sh_intensity.copy(),
            self.sh_raydrop.copy(),
            self.sh_degree,
        )

    def select(self, idx) -> "GaussianCloud":
        return GaussianCloud(
            self.means[idx],
            self.quats[idx],
            self.log_scales[idx],
            self.opacity_logits[idx],
            self.sh_intensity[idx],
            self.sh_raydrop[idx],
            self.sh_degree,
        )

    @staticmethod
    def concatenate(clouds: list["GaussianCloud"]) -> "GaussianCloud":
        degrees = {c.sh_degree for c in clouds}
        if len(degrees) != 1:
            raise ValueError(f"cannot concatenate mixed SH degrees {degrees}")
        return GaussianCloud(
            np.concatenate([c.means for c in clouds]),
            np.concatenate([c.quats for c in clouds]),
            np.concatenate([c.log_scales for c in clouds]),
            np.concatenate([c.opacity_logits for c in clouds]),
            np.concatenate([c.sh_intensity for c in clouds]),
            np.concatenate([c.sh_raydrop for c in clouds]),
            sh_degree=degrees.pop(),
        )

    # -- derived quantities ------------------------------------------------

    @property
    def scales(self) -> np.ndarray:
        return np.maximum(np.exp(self.log_scales), SCALE_MIN)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def rotations(self) -> np.ndarray:
        return quat_to_rotmat(self.quats)

    def renormalize_quats(self) -> None:
        self.quats = normalize_quats(self.quats)

    def validate(self) -> None:
        norms = np.linalg.norm(self.quats, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("quaternions drifted off unit norm")
        if not np.all(np.isfinite(self.means)):
            raise ValueError("non-finite means")


def opacity(cloud: GaussianCloud) -> np.ndarray:
    """Per-primitive opacity in (0, 1), clamped away from saturation."""
    return np.clip(cloud.opacities, 1e-7, 1.0 - 1e-7)


def intensity_at(cloud: GaussianCloud, direction) -> np.ndarray:
    """View-dependent intensity in [0, 1] for all primitives at one direction."""
    return sigmoid(sh.eval_sh(cloud.sh_intensity, direction, cloud.sh_degree))


def raydrop_at(cloud: GaussianCloud, direction) -> np.ndarray:
    """View-dependent drop probability for all primitives at one direction."""
    logits = sh.eval_sh(cloud.sh_raydrop, direction, cloud.sh_degree)
    return raydrop_prob(logits[:, 0], logits[:, 1])


# -- binary container --------------------------------------------------------
#
# Little-endian layout:
#   header: magic "GLRT" | version u32 | count u64 | sh_degree u32
#   per-primitive record (float64):
#     mean[3], quat[4], log_scale[2], opacity_logit,
#     sh_intensity[K], sh_raydrop_drop[K], sh_raydrop_hit[K]

_HEADER = struct.Struct("<4sIQI")


def save_container(path, cloud: GaussianCloud) -> None:
    n = len(cloud)
    k = sh.n_coeffs(cloud.sh_degree)
    record = np.empty((n, 10 + 3 * k), dtype="<f8")
    record[:, 0:3] = cloud.means
    record[:, 3:7] = cloud.quats
    record[:, 7:9] = cloud.log_scales
    record[:, 9] = cloud.opacity_logits
    record[:, 10 : 10 + k] = cloud.sh_intensity
    record[:, 10 + k : 10 + 2 * k] = cloud.sh_raydrop[:, 0, :]
    record[:, 10 + 2 * k :] = cloud.sh_raydrop[:, 1, :]
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION, n, cloud.sh_degree))
        f.write(record.tobytes())


def load_container(path) -> GaussianCloud:
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ValueError(f"{path}: truncated container header")
        magic, version, n, degree = _HEADER.unpack(header)
        if magic != CONTAINER_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != CONTAINER_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        k = sh.n_coeffs(degree)
        width = 10 + 3 * k
        raw = f.read(n * width * 8)
    if len(raw) != n * width * 8:
        raise ValueError(f"{path}: truncated container body")
    data = np.frombuffer(raw, dtype="<f8")
    record = data.reshape(n, width)
    sh_ray = np.stack([record[:, 10 + k : 10 + 2 * k], record[:, 10 + 2 * k :]], axis=1)
    return GaussianCloud(
        means=record[:, 0:3].copy(),
        quats=record[:, 3:7].copy(),
        log_scales=record[:, 7:9].copy(),
        opacity_logits=record[:, 9].copy(),
        sh_intensity=record[:, 10 : 10 + k].copy(),
        sh_raydrop=sh_ray.copy(),
        sh_degree=int(degree),
    )
