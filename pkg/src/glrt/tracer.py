"""Forward and backward volume rendering of LiDAR channels along rays.

Rays stream primitive hits from the BVH in chunks, blending front to back:
C = sum_i T_i * a_i * c_i with T updated multiplicatively and traversal
stopping once T falls below a threshold. The backward pass re-traverses the
identical hit stream and applies the front-to-back gradient identity
dL/da_i = T_i c_i - (C - C_i) / (1 - a_i) per channel, chaining analytically
into every primitive parameter (position, rotation, log-scale, opacity
logit, SH coefficients), including the view-direction dependence of the SH
channels.

Gradients accumulate into a fixed number of ray-block buffers that are
reduced in block order, so results are bit-identical across thread counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .bvh import _STACK_SIZE, Bvh, _next_hits
from .gaussians import ALPHA_MAX, ALPHA_MIN, GaussianCloud
from .sh import n_coeffs, sh_basis_fill, sh_basis_grad_fill

N_GRAD_BLOCKS = 8  # fixed ray partitioning; independent of thread count
N_FWD_BLOCKS = 64  # forward work granularity (per-ray outputs, no reduction)
BACKGROUND_EPS = 1e-6  # acc_alpha at or below this renders as no-return


@dataclass
class TraceConfig:
    chunk_size: int = 16
    t_min: float = 1e-4
    near: float = 0.2
    alpha_min: float = ALPHA_MIN
    alpha_max: float = ALPHA_MAX

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")


@dataclass
class FlatScene:
    """World-frame primitive arrays ready for the kernels.

    owner_frame indexes frame_rot, whose row is the world-to-owner rotation
    applied to SH view directions (row 0 is the identity for background).
    owner_tag keeps the provenance of every primitive (-1 background,
    otherwise the object slot) for editing and gradient routing.
    """

    means: np.ndarray
    quats: np.ndarray
    rots: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    sh_intensity: np.ndarray
    sh_drop: np.ndarray
    sh_hit: np.ndarray
    owner_frame: np.ndarray
    frame_rot: np.ndarray
    sh_degree: int
    owner_tag: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.owner_tag is None:
            self.owner_tag = np.full(len(self.means), -1, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.means)

    @classmethod
    def from_cloud(cls, cloud: GaussianCloud) -> "FlatScene":
        n = len(cloud)
        return cls(
            means=cloud.means.copy(),
            quats=cloud.quats.copy(),
            rots=np.ascontiguousarray(cloud.rotations()),
            scales=np.ascontiguousarray(cloud.scales),
            opacities=np.ascontiguousarray(cloud.opacities),
            sh_intensity=cloud.sh_intensity.copy(),
            sh_drop=np.ascontiguousarray(cloud.sh_raydrop[:, 0, :]),
            sh_hit=np.ascontiguousarray(cloud.sh_raydrop[:, 1, :]),
            owner_frame=np.zeros(n, dtype=np.int64),
            frame_rot=np.eye(3)[None],
            sh_degree=cloud.sh_degree,
        )

    def kernel_args(self):
        return (
            self.means,
            self.rots,
            self.scales,
            self.opacities,
            self.sh_intensity,
            self.sh_drop,
            self.sh_hit,
            self.owner_frame,
            self.frame_rot,
            self.sh_degree,
        )


@dataclass
class RenderResult:
    """Per-ray raw channel sums plus bookkeeping.

    Raw channels are the plain front-to-back accumulations; the normalized
    accessors divide by acc_alpha where a ray actually hit something."""

    depth_raw: np.ndarray
    intensity_raw: np.ndarray
    raydrop_raw: np.ndarray
    acc_alpha: np.ndarray
    t_final: np.ndarray
    n_contrib: np.ndarray

    @property
    def hit_mask(self) -> np.ndarray:
        return self.acc_alpha > BACKGROUND_EPS

    def _normalized(self, raw: np.ndarray) -> np.ndarray:
        out = np.zeros_like(raw)
        m = self.hit_mask
        out[m] = raw[m] / self.acc_alpha[m]
        return out

    @property
    def depth(self) -> np.ndarray:
        return self._normalized(self.depth_raw)

    @property
    def intensity(self) -> np.ndarray:
        return self._normalized(self.intensity_raw)

    @property
    def raydrop(self) -> np.ndarray:
        return self._normalized(self.raydrop_raw)

    @property
    def no_return_prob(self) -> np.ndarray:
        """Probability the ray yields no return: blended drop mass plus
        whatever transmittance never hit anything."""
        return self.raydrop_raw + (1.0 - self.acc_alpha)

    def totals(self) -> np.ndarray:
        return np.stack([self.depth_raw, self.intensity_raw, self.raydrop_raw, self.acc_alpha], 1)


@dataclass
class RenderGradients:
    d_means: np.ndarray
    d_quats: np.ndarray
    d_log_scales: np.ndarray
    d_opacity_logits: np.ndarray
    d_sh_intensity: np.ndarray
    d_sh_raydrop: np.ndarray  # (N, 2, K): drop, hit

    @classmethod
    def zeros(cls, n: int, k: int) -> "RenderGradients":
        return cls(
            np.zeros((n, 3)),
            np.zeros((n, 4)),
            np.zeros((n, 2)),
            np.zeros(n),
            np.zeros((n, k)),
            np.zeros((n, 2, k)),
        )

    def position_grad_norms(self) -> np.ndarray:
        return np.linalg.norm(self.d_means, axis=1)


@njit(cache=True, inline="always")
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True, inline="always")
def _softmax_drop(bd, bh):
    m = bd if bd > bh else bh
    ed = math.exp(bd - m)
    eh = math.exp(bh - m)
    return ed / (ed + eh)


@njit(cache=True)
def _trace_ray_forward(
    bvh_args,
    means,
    rots,
    scales,
    opacities,
    sh_int,
    sh_drop,
    sh_hit,
    owner_frame,
    frame_rot,
    sh_degree,
    ox,
    oy,
    oz,
    dx,
    dy,
    dz,
    chunk_size,
    t_min,
    near,
    alpha_min,
    alpha_max,
    t_buf,
    i_buf,
    stack,
    stack_t,
    basis,
):
    (nmin, nmax, nleft, nright, nstart, ncount, tv0, tv1, tv2, tpp, tpn, tprim) = bvh_args
    trans = 1.0
    c_depth = 0.0
    c_int = 0.0
    c_ray = 0.0
    acc = 0.0
    ncon = 0
    cur_t = near
    cur_i = np.int64(1) << 62
    while True:
        n = _next_hits(
            nmin, nmax, nleft, nright, nstart, ncount, tv0, tv1, tv2, tpp, tpn, tprim,
            ox, oy, oz, dx, dy, dz, cur_t, cur_i, chunk_size, t_buf, i_buf, stack, stack_t,
        )
        stopped = False
        for k in range(n):
            t = t_buf[k]
            p = i_buf[k]
            hx = ox + t * dx - means[p, 0]
            hy = oy + t * dy - means[p, 1]
            hz = oz + t * dz - means[p, 2]
            u = (hx * rots[p, 0, 0] + hy * rots[p, 1, 0] + hz * rots[p, 2, 0]) / scales[p, 0]
            v = (hx * rots[p, 0, 1] + hy * rots[p, 1, 1] + hz * rots[p, 2, 1]) / scales[p, 1]
            g = math.exp(-0.5 * (u * u + v * v))
            a = opacities[p] * g
            if a < alpha_min:
                continue
            if a > alpha_max:
                a = alpha_max
            # SH view direction: sensor origin toward the mean, owner frame
            mx = means[p, 0] - ox
            my = means[p, 1] - oy
            mz = means[p, 2] - oz
            r = math.sqrt(mx * mx + my * my + mz * mz)
            if r < 1e-9:
                r = 1e-9
            uwx = mx / r
            uwy = my / r
            uwz = mz / r
            f = owner_frame[p]
            dsx = frame_rot[f, 0, 0] * uwx + frame_rot[f, 0, 1] * uwy + frame_rot[f, 0, 2] * uwz
            dsy = frame_rot[f, 1, 0] * uwx + frame_rot[f, 1, 1] * uwy + frame_rot[f, 1, 2] * uwz
            dsz = frame_rot[f, 2, 0] * uwx + frame_rot[f, 2, 1] * uwy + frame_rot[f, 2, 2] * uwz
            sh_basis_fill(sh_degree, dsx, dsy, dsz, basis)
            s_int = 0.0
            bd = 0.0
            bh = 0.0
            for q in range(basis.shape[0]):
                s_int += sh_int[p, q] * basis[q]
                bd += sh_drop[p, q] * basis[q]
                bh += sh_hit[p, q] * basis[q]
            zeta = _sigmoid(s_int)
            beta = _softmax_drop(bd, bh)
            w = trans * a
            c_depth += w * t
            c_int += w * zeta
            c_ray += w * beta
            acc += w
            ncon += 1
            trans *= 1.0 - a
            if trans < t_min:
                stopped = True
                break
        if stopped or n < chunk_size:
            break
        cur_t = t_buf[n - 1]
        cur_i = i_buf[n - 1]
    return c_depth, c_int, c_ray, acc, trans, ncon


@njit(cache=True, parallel=True)
def _forward_kernel(
    bvh_args,
    means,
    rots,
    scales,
    opacities,
    sh_int,
    sh_drop,
    sh_hit,
    owner_frame,
    frame_rot,
    sh_degree,
    origins,
    dirs,
    chunk_size,
    t_min,
    near,
    alpha_min,
    alpha_max,
    out,
    out_ncon,
):
    n_rays = len(origins)
    k = n_coeffs_jit(sh_degree)
    n_blocks = min(N_FWD_BLOCKS, n_rays) if n_rays > 0 else 0
    per = (n_rays + n_blocks - 1) // n_blocks if n_blocks else 0
    for b in prange(n_blocks):
        t_buf = np.empty(chunk_size)
        i_buf = np.empty(chunk_size, dtype=np.int64)
        stack = np.empty(_STACK_SIZE, dtype=np.int64)
        stack_t = np.empty(_STACK_SIZE)
        basis = np.empty(k)
        for ri in range(b * per, min((b + 1) * per, n_rays)):
            c_depth, c_int, c_ray, acc, trans, ncon = _trace_ray_forward(
                bvh_args,
                means, rots, scales, opacities, sh_int, sh_drop, sh_hit,
                owner_frame, frame_rot, sh_degree,
                origins[ri, 0], origins[ri, 1], origins[ri, 2],
                dirs[ri, 0], dirs[ri, 1], dirs[ri, 2],
                chunk_size, t_min, near, alpha_min, alpha_max,
                t_buf, i_buf, stack, stack_t, basis,
            )
            out[ri, 0] = c_depth
            out[ri, 1] = c_int
            out[ri, 2] = c_ray
            out[ri, 3] = acc
            out[ri, 4] = trans
            out_ncon[ri] = ncon


@njit(cache=True, inline="always")
def n_coeffs_jit(degree):
    return (degree + 1) * (degree + 1)


@njit(cache=True)
def _backward_block(
    bvh_args,
    means,
    rots,
    quats,
    scales,
    opacities,
    sh_int,
    sh_drop,
    sh_hit,
    owner_frame,
    frame_rot,
    sh_degree,
    origins,
    dirs,
    upstream,
    fwd_totals,
    ray_lo,
    ray_hi,
    chunk_size,
    t_min,
    near,
    alpha_min,
    alpha_max,
    g_mean,
    g_quat,
    g_logscale,
    g_opa,
    g_shint,
    g_shdrop,
    g_shhit,
    check_err,
):
    (nmin, nmax, nleft, nright, nstart, ncount, tv0, tv1, tv2, tpp, tpn, tprim) = bvh_args
    k = n_coeffs_jit(sh_degree)
    t_buf = np.empty(chunk_size)
    i_buf = np.empty(chunk_size, dtype=np.int64)
    stack = np.empty(_STACK_SIZE, dtype=np.int64)
    stack_t = np.empty(_STACK_SIZE)
    basis = np.empty(k)
    bgrad = np.empty((k, 3))
    worst = 0.0
    for ri in range(ray_lo, ray_hi):
        ox = origins[ri, 0]
        oy = origins[ri, 1]
        oz = origins[ri, 2]
        dx = dirs[ri, 0]
        dy = dirs[ri, 1]
        dz = dirs[ri, 2]
        # trusted forward totals feed the (C - C_i) terms; the re-traversal
        # re-accumulates them and any disagreement flags a changed scene
        c_depth = fwd_totals[ri, 0]
        c_int = fwd_totals[ri, 1]
        c_ray = fwd_totals[ri, 2]
        acc = fwd_totals[ri, 3]
        g_d = upstream[ri, 0]
        g_i = upstream[ri, 1]
        g_r = upstream[ri, 2]
        g_a = upstream[ri, 3]
        has_grad = g_d != 0.0 or g_i != 0.0 or g_r != 0.0 or g_a != 0.0
        trans = 1.0
        cd_i = 0.0
        ci_i = 0.0
        cr_i = 0.0
        a_i = 0.0
        cur_t = near
        cur_i = np.int64(1) << 62
        done = False
        while not done:
            n = _next_hits(
                nmin, nmax, nleft, nright, nstart, ncount, tv0, tv1, tv2, tpp, tpn, tprim,
                ox, oy, oz, dx, dy, dz, cur_t, cur_i, chunk_size, t_buf, i_buf, stack, stack_t,
            )
            for kk in range(n):
                t = t_buf[kk]
                p = i_buf[kk]
                hx = ox + t * dx - means[p, 0]
                hy = oy + t * dy - means[p, 1]
                hz = oz + t * dz - means[p, 2]
                su = scales[p, 0]
                sv = scales[p, 1]
                tux = rots[p, 0, 0]
                tuy = rots[p, 1, 0]
                tuz = rots[p, 2, 0]
                tvx = rots[p, 0, 1]
                tvy = rots[p, 1, 1]
                tvz = rots[p, 2, 1]
                nx = rots[p, 0, 2]
                ny = rots[p, 1, 2]
                nz = rots[p, 2, 2]
                u = (hx * tux + hy * tuy + hz * tuz) / su
                v = (hx * tvx + hy * tvy + hz * tvz) / sv
                g = math.exp(-0.5 * (u * u + v * v))
                sig = opacities[p]
                a_raw = sig * g
                if a_raw < alpha_min:
                    continue
                clamped = a_raw > alpha_max
                a = alpha_max if clamped else a_raw
                # SH channels at this primitive's view direction
                mx = means[p, 0] - ox
                my = means[p, 1] - oy
                mz = means[p, 2] - oz
                r = math.sqrt(mx * mx + my * my + mz * mz)
                if r < 1e-9:
                    r = 1e-9
                uwx = mx / r
                uwy = my / r
                uwz = mz / r
                f = owner_frame[p]
                dsx = frame_rot[f, 0, 0] * uwx + frame_rot[f, 0, 1] * uwy + frame_rot[f, 0, 2] * uwz
                dsy = frame_rot[f, 1, 0] * uwx + frame_rot[f, 1, 1] * uwy + frame_rot[f, 1, 2] * uwz
                dsz = frame_rot[f, 2, 0] * uwx + frame_rot[f, 2, 1] * uwy + frame_rot[f, 2, 2] * uwz
                sh_basis_fill(sh_degree, dsx, dsy, dsz, basis)
                s_int = 0.0
                bd = 0.0
                bh = 0.0
                for q in range(k):
                    s_int += sh_int[p, q] * basis[q]
                    bd += sh_drop[p, q] * basis[q]
                    bh += sh_hit[p, q] * basis[q]
                zeta = _sigmoid(s_int)
                beta = _softmax_drop(bd, bh)
                w = trans * a
                cd_i += w * t
                ci_i += w * zeta
                cr_i += w * beta
                a_i += w
                one_m = 1.0 - a
                if not has_grad:
                    trans *= one_m
                    if trans < t_min:
                        done = True
                        break
                    continue
                sh_basis_grad_fill(sh_degree, dsx, dsy, dsz, bgrad)
                # dL/da via the front-to-back identity, summed over channels
                da = (
                    g_d * (trans * t - (c_depth - cd_i) / one_m)
                    + g_i * (trans * zeta - (c_int - ci_i) / one_m)
                    + g_r * (trans * beta - (c_ray - cr_i) / one_m)
                    + g_a * (trans - (acc - a_i) / one_m)
                )
                g_t = g_d * w  # dL/dt_i (depth channel value)
                g_zeta = g_i * w
                g_beta = g_r * w
                # opacity and scale chains (dead if the alpha clamp engaged)
                if clamped:
                    du_coef = 0.0
                    dv_coef = 0.0
                else:
                    du_coef = -da * a_raw * u
                    dv_coef = -da * a_raw * v
                    g_logscale[p, 0] += da * a_raw * u * u
                    g_logscale[p, 1] += da * a_raw * v * v
                    g_opa[p] += da * g * sig * (1.0 - sig)
                ddn = dx * nx + dy * ny + dz * nz
                ddu = dx * tux + dy * tuy + dz * tuz
                ddv = dx * tvx + dy * tvy + dz * tvz
                # position: direct u/v terms, plane-shift terms, depth channel
                cu = du_coef / su
                cv = dv_coef / sv
                cn = (cu * ddu + cv * ddv + g_t) / ddn
                g_mean[p, 0] += cn * nx - cu * tux - cv * tvx
                g_mean[p, 1] += cn * ny - cu * tuy - cv * tvy
                g_mean[p, 2] += cn * nz - cu * tuz - cv * tvz
                # rotation columns
                gux = cu * hx
                guy = cu * hy
                guz = cu * hz
                gvx = cv * hx
                gvy = cv * hy
                gvz = cv * hz
                gnx = -cn * hx
                gny = -cn * hy
                gnz = -cn * hz
                qw = quats[p, 0]
                qx = quats[p, 1]
                qy = quats[p, 2]
                qz = quats[p, 3]
                g_quat[p, 0] += 2.0 * (
                    qz * (guy - gvx) + qy * (gnx - guz) + qx * (gvz - gny)
                )
                g_quat[p, 1] += 2.0 * (
                    qy * (gvx + guy) + qz * (gnx + guz) + qw * (gvz - gny) - 2.0 * qx * (gvy + gnz)
                )
                g_quat[p, 2] += 2.0 * (
                    qx * (gvx + guy) + qw * (gnx - guz) + qz * (gny + gvz) - 2.0 * qy * (gux + gnz)
                )
                g_quat[p, 3] += 2.0 * (
                    qw * (guy - gvx) + qx * (gnx + guz) + qy * (gny + gvz) - 2.0 * qz * (gux + gvy)
                )
                # SH coefficients and the view-direction chain back to position
                dzeta_pre = g_zeta * zeta * (1.0 - zeta)
                dbeta_pre = g_beta * beta * (1.0 - beta)
                gdsx = 0.0
                gdsy = 0.0
                gdsz = 0.0
                for q in range(k):
                    g_shint[p, q] += dzeta_pre * basis[q]
                    g_shdrop[p, q] += dbeta_pre * basis[q]
                    g_shhit[p, q] -= dbeta_pre * basis[q]
                    cc = dzeta_pre * sh_int[p, q] + dbeta_pre * (sh_drop[p, q] - sh_hit[p, q])
                    gdsx += cc * bgrad[q, 0]
                    gdsy += cc * bgrad[q, 1]
                    gdsz += cc * bgrad[q, 2]
                # through the owner-frame rotation, then the normalization
                guwx = frame_rot[f, 0, 0] * gdsx + frame_rot[f, 1, 0] * gdsy + frame_rot[f, 2, 0] * gdsz
                guwy = frame_rot[f, 0, 1] * gdsx + frame_rot[f, 1, 1] * gdsy + frame_rot[f, 2, 1] * gdsz
                guwz = frame_rot[f, 0, 2] * gdsx + frame_rot[f, 1, 2] * gdsy + frame_rot[f, 2, 2] * gdsz
                rad = uwx * guwx + uwy * guwy + uwz * guwz
                g_mean[p, 0] += (guwx - uwx * rad) / r
                g_mean[p, 1] += (guwy - uwy * rad) / r
                g_mean[p, 2] += (guwz - uwz * rad) / r
                trans *= one_m
                if trans < t_min:
                    done = True
                    break
            if done or n < chunk_size:
                done = True
            else:
                cur_t = t_buf[n - 1]
                cur_i = i_buf[n - 1]
        err = abs(cd_i - c_depth) / (1.0 + abs(c_depth))
        err = max(err, abs(ci_i - c_int) / (1.0 + abs(c_int)))
        err = max(err, abs(cr_i - c_ray) / (1.0 + abs(c_ray)))
        err = max(err, abs(a_i - acc) / (1.0 + abs(acc)))
        if err > worst:
            worst = err
    check_err[0] = worst


@njit(cache=True, parallel=True)
def _backward_kernel(
    bvh_args,
    means,
    rots,
    quats,
    scales,
    opacities,
    sh_int,
    sh_drop,
    sh_hit,
    owner_frame,
    frame_rot,
    sh_degree,
    origins,
    dirs,
    upstream,
    fwd_totals,
    chunk_size,
    t_min,
    near,
    alpha_min,
    alpha_max,
    g_mean,
    g_quat,
    g_logscale,
    g_opa,
    g_shint,
    g_shdrop,
    g_shhit,
    check_err,
):
    n_rays = len(origins)
    n_blocks = g_mean.shape[0]
    per = (n_rays + n_blocks - 1) // n_blocks
    for b in prange(n_blocks):
        lo = b * per
        hi = min(lo + per, n_rays)
        if lo >= hi:
            continue
        _backward_block(
            bvh_args,
            means, rots, quats, scales, opacities, sh_int, sh_drop, sh_hit,
            owner_frame, frame_rot, sh_degree,
            origins, dirs, upstream, fwd_totals,
            lo, hi,
            chunk_size, t_min, near, alpha_min, alpha_max,
            g_mean[b], g_quat[b], g_logscale[b], g_opa[b],
            g_shint[b], g_shdrop[b], g_shhit[b],
            check_err[b:b + 1],
        )


def gaussian_response(mean, rotation, scales, opacity_value, origin, direction):
    """Single-primitive ray response: (t, alpha); (inf, 0) when the ray is
    parallel to the disk plane or behind the origin."""
    mean = np.asarray(mean, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    normal = rotation[:, 2]
    denom = float(direction @ normal)
    if abs(denom) < 1e-9:
        return np.inf, 0.0
    t = float((mean - origin) @ normal) / denom
    if t <= 0.0:
        return np.inf, 0.0
    h = origin + t * direction - mean
    u = float(h @ rotation[:, 0]) / scales[0]
    v = float(h @ rotation[:, 1]) / scales[1]
    alpha = opacity_value * np.exp(-0.5 * (u * u + v * v))
    return t, float(min(alpha, ALPHA_MAX))


def trace_forward(
    scene: FlatScene, bvh: Bvh, origins, dirs, config: TraceConfig | None = None
) -> RenderResult:
    config = config or TraceConfig()
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    out = np.zeros((len(origins), 5))
    ncon = np.zeros(len(origins), dtype=np.int64)
    _forward_kernel(
        bvh.kernel_args(),
        *scene.kernel_args(),
        origins,
        dirs,
        config.chunk_size,
        config.t_min,
        config.near,
        config.alpha_min,
        config.alpha_max,
        out,
        ncon,
    )
    return RenderResult(
        depth_raw=out[:, 0].copy(),
        intensity_raw=out[:, 1].copy(),
        raydrop_raw=out[:, 2].copy(),
        acc_alpha=out[:, 3].copy(),
        t_final=out[:, 4].copy(),
        n_contrib=ncon,
    )


def trace_backward(
    scene: FlatScene,
    bvh: Bvh,
    origins,
    dirs,
    result: RenderResult,
    upstream: np.ndarray,
    config: TraceConfig | None = None,
    checksum_tol: float = 1e-9,
) -> RenderGradients:
    """Analytic gradients of a scalar loss with per-ray upstream gradients
    [dL/d depth_raw, dL/d intensity_raw, dL/d raydrop_raw, dL/d acc_alpha].

    The kernel re-traverses each ray; if the recomputed channel totals do
    not match ``result`` the scene changed since the forward pass, which is
    an error.
    """
    config = config or TraceConfig()
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    upstream = np.ascontiguousarray(upstream, dtype=np.float64).reshape(len(origins), 4)
    n = len(scene)
    k = n_coeffs(scene.sh_degree)
    nb = N_GRAD_BLOCKS
    g_mean = np.zeros((nb, n, 3))
    g_quat = np.zeros((nb, n, 4))
    g_logscale = np.zeros((nb, n, 2))
    g_opa = np.zeros((nb, n))
    g_shint = np.zeros((nb, n, k))
    g_shdrop = np.zeros((nb, n, k))
    g_shhit = np.zeros((nb, n, k))
    check_err = np.zeros(nb)
    _backward_kernel(
        bvh.kernel_args(),
        scene.means,
        scene.rots,
        scene.quats,
        scene.scales,
        scene.opacities,
        scene.sh_intensity,
        scene.sh_drop,
        scene.sh_hit,
        scene.owner_frame,
        scene.frame_rot,
        scene.sh_degree,
        origins,
        dirs,
        upstream,
        result.totals(),
        config.chunk_size,
        config.t_min,
        config.near,
        config.alpha_min,
        config.alpha_max,
        g_mean,
        g_quat,
        g_logscale,
        g_opa,
        g_shint,
        g_shdrop,
        g_shhit,
        check_err,
    )
    if np.max(check_err) > checksum_tol:
        raise RuntimeError(
            f"forward/backward scene mismatch: relative checksum error {np.max(check_err):.3e}"
        )
    # deterministic tree-free reduction: fixed block order
    grads = RenderGradients.zeros(n, k)
    for b in range(nb):
        grads.d_means += g_mean[b]
        grads.d_quats += g_quat[b]
        grads.d_log_scales += g_logscale[b]
        grads.d_opacity_logits += g_opa[b]
        grads.d_sh_intensity += g_shint[b]
        grads.d_sh_raydrop[:, 0, :] += g_shdrop[b]
        grads.d_sh_raydrop[:, 1, :] += g_shhit[b]
    return grads


def blend_alpha_grads_front_to_back(alphas, values):
    """Per-alpha gradient of C = sum T_i a_i c_i via the front-to-back
    identity T_i c_i - (C - C_i)/(1 - a_i)."""
    alphas = np.asarray(alphas, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    t = np.concatenate([[1.0], np.cumprod(1.0 - alphas)[:-1]])
    w = t * alphas
    c_total = np.sum(w * values)
    c_incl = np.cumsum(w * values)
    return t * values - (c_total - c_incl) / (1.0 - alphas)


def blend_alpha_grads_back_to_front(alphas, values):
    """Same gradient accumulated in reverse blending order (the rasterizer
    formulation): T_i * (c_i - accum_behind_i)."""
    alphas = np.asarray(alphas, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    n = len(alphas)
    t = np.concatenate([[1.0], np.cumprod(1.0 - alphas)[:-1]])
    out = np.empty(n)
    accum = 0.0
    for i in range(n - 1, -1, -1):
        out[i] = t[i] * (values[i] - accum)
        accum = alphas[i] * values[i] + (1.0 - alphas[i]) * accum
    return out


def flatten_cloud(cloud: GaussianCloud) -> FlatScene:
    return FlatScene.from_cloud(cloud)


def render_checksum(result: RenderResult) -> float:
    """Order-independent digest of a render, for cheap equality checks."""
    return float(
        np.sum(result.depth_raw)
        + 3.0 * np.sum(result.intensity_raw)
        + 7.0 * np.sum(result.raydrop_raw)
        + 13.0 * np.sum(result.acc_alpha)
    )
