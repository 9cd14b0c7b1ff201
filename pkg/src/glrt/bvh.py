"""Proxy geometry and BVH ray traversal.

Each Gaussian disk is wrapped by a pair of co-planar triangles tiling the
rectangle mu +- cutoff*s_u*t_u +- cutoff*s_v*t_v. Both triangles of a quad
carry the same plane anchor (mean, normal), so a ray crossing either one
reports the identical intersection distance: deduplication of twin hits is
exact, within a traversal call and across resumed calls.

``next_hits`` streams hits in ascending (t, primitive) order. The cursor is
the lexicographic pair (t_start, idx_start): a hit qualifies when its pair
is strictly greater, which makes resumed chunked traversal reproduce the
full sorted hit list even through exact depth ties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

CUTOFF_K = 3.0  # response at the quad edge: exp(-4.5) of peak

MAX_LEAF_SIZE = 4
_STACK_SIZE = 256


def build_proxy_triangles(means, rotations, scales, cutoff: float = CUTOFF_K):
    """Two bounding triangles per primitive.

    Returns (v0, v1, v2, plane_point, plane_normal, prim_index); triangle
    2i and 2i+1 belong to primitive i and share its plane anchor exactly.
    """
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    n = len(means)
    rotations = np.asarray(rotations, dtype=np.float64).reshape(n, 3, 3)
    scales = np.asarray(scales, dtype=np.float64).reshape(n, 2)
    eu = cutoff * scales[:, 0:1] * rotations[:, :, 0]
    ev = cutoff * scales[:, 1:2] * rotations[:, :, 1]
    c_mm = means - eu - ev
    c_pm = means + eu - ev
    c_pp = means + eu + ev
    c_mp = means - eu + ev
    v0 = np.empty((2 * n, 3))
    v1 = np.empty((2 * n, 3))
    v2 = np.empty((2 * n, 3))
    v0[0::2], v1[0::2], v2[0::2] = c_mm, c_pm, c_pp
    v0[1::2], v1[1::2], v2[1::2] = c_mm, c_pp, c_mp
    plane_p = np.repeat(means, 2, axis=0)
    plane_n = np.repeat(rotations[:, :, 2], 2, axis=0)
    prim = np.repeat(np.arange(n, dtype=np.int64), 2)
    return v0, v1, v2, plane_p, plane_n, prim


@njit(cache=True)
def _tri_hit(tv0, tv1, tv2, tpp, tpn, k, ox, oy, oz, dx, dy, dz):
    """Distance to triangle k along the ray, or -1 on miss.

    t comes from the stored plane anchor; the containment test uses signed
    areas on the dominant-axis projection with inclusive boundaries.
    """
    nx = tpn[k, 0]
    ny = tpn[k, 1]
    nz = tpn[k, 2]
    denom = dx * nx + dy * ny + dz * nz
    if denom > -1e-12 and denom < 1e-12:
        return -1.0
    t = ((tpp[k, 0] - ox) * nx + (tpp[k, 1] - oy) * ny + (tpp[k, 2] - oz) * nz) / denom
    if t <= 0.0:
        return -1.0
    px = ox + t * dx
    py = oy + t * dy
    pz = oz + t * dz
    anx = abs(nx)
    any_ = abs(ny)
    anz = abs(nz)
    if anx >= any_ and anx >= anz:
        ax, ay = tv0[k, 1], tv0[k, 2]
        bx, by = tv1[k, 1], tv1[k, 2]
        cx, cy = tv2[k, 1], tv2[k, 2]
        qx, qy = py, pz
    elif any_ >= anz:
        ax, ay = tv0[k, 0], tv0[k, 2]
        bx, by = tv1[k, 0], tv1[k, 2]
        cx, cy = tv2[k, 0], tv2[k, 2]
        qx, qy = px, pz
    else:
        ax, ay = tv0[k, 0], tv0[k, 1]
        bx, by = tv1[k, 0], tv1[k, 1]
        cx, cy = tv2[k, 0], tv2[k, 1]
        qx, qy = px, py
    area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    s0 = (bx - qx) * (cy - qy) - (by - qy) * (cx - qx)
    s1 = (cx - qx) * (ay - qy) - (cy - qy) * (ax - qx)
    s2 = (ax - qx) * (by - qy) - (ay - qy) * (bx - qx)
    if area >= 0.0:
        inside = s0 >= 0.0 and s1 >= 0.0 and s2 >= 0.0
    else:
        inside = s0 <= 0.0 and s1 <= 0.0 and s2 <= 0.0
    if inside:
        return t
    return -1.0


@njit(cache=True)
def _build_bvh(tmin, tmax, cent):
    m = len(cent)
    cap = 2 * m + 2
    node_min = np.empty((cap, 3))
    node_max = np.empty((cap, 3))
    node_left = np.full(cap, -1, dtype=np.int64)
    node_right = np.full(cap, -1, dtype=np.int64)
    node_start = np.zeros(cap, dtype=np.int64)
    node_count = np.zeros(cap, dtype=np.int64)
    perm = np.arange(m)

    stack = np.empty((_STACK_SIZE, 3), dtype=np.int64)  # node, lo, hi
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = m
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        node = stack[sp, 0]
        lo = stack[sp, 1]
        hi = stack[sp, 2]
        bmin = np.full(3, np.inf)
        bmax = np.full(3, -np.inf)
        cmin = np.full(3, np.inf)
        cmax = np.full(3, -np.inf)
        for i in range(lo, hi):
            k = perm[i]
            for a in range(3):
                if tmin[k, a] < bmin[a]:
                    bmin[a] = tmin[k, a]
                if tmax[k, a] > bmax[a]:
                    bmax[a] = tmax[k, a]
                if cent[k, a] < cmin[a]:
                    cmin[a] = cent[k, a]
                if cent[k, a] > cmax[a]:
                    cmax[a] = cent[k, a]
        node_min[node] = bmin
        node_max[node] = bmax
        count = hi - lo
        if count <= MAX_LEAF_SIZE:
            node_start[node] = lo
            node_count[node] = count
            continue
        axis = 0
        ext = cmax[0] - cmin[0]
        if cmax[1] - cmin[1] > ext:
            axis = 1
            ext = cmax[1] - cmin[1]
        if cmax[2] - cmin[2] > ext:
            axis = 2
        mid = lo + count // 2
        _nth_element(perm, lo, hi, mid, cent, axis)
        left = n_nodes
        right = n_nodes + 1
        n_nodes += 2
        node_left[node] = left
        node_right[node] = right
        stack[sp, 0] = left
        stack[sp, 1] = lo
        stack[sp, 2] = mid
        stack[sp + 1, 0] = right
        stack[sp + 1, 1] = mid
        stack[sp + 1, 2] = hi
        sp += 2
    return (
        node_min[:n_nodes].copy(),
        node_max[:n_nodes].copy(),
        node_left[:n_nodes].copy(),
        node_right[:n_nodes].copy(),
        node_start[:n_nodes].copy(),
        node_count[:n_nodes].copy(),
        perm,
    )


@njit(cache=True)
def _nth_element(perm, lo, hi, mid, cent, axis):
    """Partial sort: perm[mid] lands at its sorted-by-centroid position."""
    while hi - lo > 1:
        a = cent[perm[lo], axis]
        b = cent[perm[(lo + hi) // 2], axis]
        c = cent[perm[hi - 1], axis]
        # median of three
        if a > b:
            a, b = b, a
        if b > c:
            b = c if a <= c else a
        pivot = b
        i = lo
        j = hi - 1
        while i <= j:
            while cent[perm[i], axis] < pivot:
                i += 1
            while cent[perm[j], axis] > pivot:
                j -= 1
            if i <= j:
                tmp = perm[i]
                perm[i] = perm[j]
                perm[j] = tmp
                i += 1
                j -= 1
        if mid <= j:
            hi = j + 1
        elif mid >= i:
            lo = i
        else:
            return


@njit(cache=True, inline="always")
def _slab_test(node_min, node_max, node, ox, oy, oz, ix, iy, iz):
    """(entry, exit) of the ray against a node box; entry > exit on miss.

    ix/iy/iz are precomputed reciprocal direction components (inf where the
    direction is zero). 0 * inf produces NaN exactly when the origin sits
    on a slab boundary of a parallel ray; the comparisons below are ordered
    so NaN leaves that axis unconstrained, which only admits extra visits.
    """
    t_entry = 0.0
    t_exit = np.inf
    t0 = (node_min[node, 0] - ox) * ix
    t1 = (node_max[node, 0] - ox) * ix
    if t0 > t1:
        t0, t1 = t1, t0
    if t0 > t_entry:
        t_entry = t0
    if t1 < t_exit:
        t_exit = t1
    t0 = (node_min[node, 1] - oy) * iy
    t1 = (node_max[node, 1] - oy) * iy
    if t0 > t1:
        t0, t1 = t1, t0
    if t0 > t_entry:
        t_entry = t0
    if t1 < t_exit:
        t_exit = t1
    t0 = (node_min[node, 2] - oz) * iz
    t1 = (node_max[node, 2] - oz) * iz
    if t0 > t1:
        t0, t1 = t1, t0
    if t0 > t_entry:
        t_entry = t0
    if t1 < t_exit:
        t_exit = t1
    return t_entry, t_exit


@njit(cache=True, inline="always")
def _inv_dir(d):
    if d != 0.0:
        return 1.0 / d
    return np.inf


@njit(cache=True)
def _next_hits(
    node_min,
    node_max,
    node_left,
    node_right,
    node_start,
    node_count,
    tv0,
    tv1,
    tv2,
    tpp,
    tpn,
    tprim,
    ox,
    oy,
    oz,
    dx,
    dy,
    dz,
    t_start,
    idx_start,
    max_hits,
    out_t,
    out_i,
    stack,
    stack_t,
):
    """Collect the max_hits smallest hits with (t, prim) > (t_start, idx_start).

    out_t/out_i must hold max_hits entries; returns the number found. The
    buffer stays sorted ascending by (t, prim) and never holds duplicates.
    Each node's slab test runs once: entries ride the stack so popped nodes
    only re-check against the current buffer bound.
    """
    n_in = 0
    ix = _inv_dir(dx)
    iy = _inv_dir(dy)
    iz = _inv_dir(dz)
    e0, x0 = _slab_test(node_min, node_max, 0, ox, oy, oz, ix, iy, iz)
    if e0 > x0 or x0 < t_start:
        return 0
    stack[0] = 0
    stack_t[0] = e0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if n_in == max_hits and stack_t[sp] > out_t[n_in - 1]:
            continue
        if node_count[node] > 0:
            start = node_start[node]
            for j in range(start, start + node_count[node]):
                t = _tri_hit(tv0, tv1, tv2, tpp, tpn, j, ox, oy, oz, dx, dy, dz)
                if t < 0.0:
                    continue
                prim = tprim[j]
                if t < t_start or (t == t_start and prim <= idx_start):
                    continue
                if n_in == max_hits and (
                    t > out_t[n_in - 1] or (t == out_t[n_in - 1] and prim >= out_i[n_in - 1])
                ):
                    continue
                # sorted insert with exact-duplicate rejection (twin triangle)
                pos = n_in
                while pos > 0 and (
                    out_t[pos - 1] > t or (out_t[pos - 1] == t and out_i[pos - 1] > prim)
                ):
                    pos -= 1
                if pos > 0 and out_t[pos - 1] == t and out_i[pos - 1] == prim:
                    continue
                top = n_in if n_in < max_hits else max_hits - 1
                for q in range(top, pos, -1):
                    out_t[q] = out_t[q - 1]
                    out_i[q] = out_i[q - 1]
                out_t[pos] = t
                out_i[pos] = prim
                if n_in < max_hits:
                    n_in += 1
        else:
            left = node_left[node]
            right = node_right[node]
            el, xl = _slab_test(node_min, node_max, left, ox, oy, oz, ix, iy, iz)
            er, xr = _slab_test(node_min, node_max, right, ox, oy, oz, ix, iy, iz)
            ok_l = el <= xl and xl >= t_start
            ok_r = er <= xr and xr >= t_start
            if n_in == max_hits:
                if ok_l and el > out_t[n_in - 1]:
                    ok_l = False
                if ok_r and er > out_t[n_in - 1]:
                    ok_r = False
            if ok_l and ok_r:
                if el <= er:
                    stack[sp] = right
                    stack_t[sp] = er
                    stack[sp + 1] = left
                    stack_t[sp + 1] = el
                else:
                    stack[sp] = left
                    stack_t[sp] = el
                    stack[sp + 1] = right
                    stack_t[sp + 1] = er
                sp += 2
            elif ok_l:
                stack[sp] = left
                stack_t[sp] = el
                sp += 1
            elif ok_r:
                stack[sp] = right
                stack_t[sp] = er
                sp += 1
    return n_in


@njit(cache=True)
def _linear_scan(
    tv0, tv1, tv2, tpp, tpn, tprim, ox, oy, oz, dx, dy, dz, t_start, idx_start, out_t, out_i
):
    """All qualifying hits by brute force over every triangle, sorted and
    deduplicated with the same cursor rule as the traversal."""
    n = 0
    for j in range(len(tprim)):
        t = _tri_hit(tv0, tv1, tv2, tpp, tpn, j, ox, oy, oz, dx, dy, dz)
        if t < 0.0:
            continue
        prim = tprim[j]
        if t < t_start or (t == t_start and prim <= idx_start):
            continue
        pos = n
        while pos > 0 and (out_t[pos - 1] > t or (out_t[pos - 1] == t and out_i[pos - 1] > prim)):
            pos -= 1
        if pos > 0 and out_t[pos - 1] == t and out_i[pos - 1] == prim:
            continue
        for q in range(n, pos, -1):
            out_t[q] = out_t[q - 1]
            out_i[q] = out_i[q - 1]
        out_t[pos] = t
        out_i[pos] = prim
        n += 1
    return n


@dataclass
class Bvh:
    """Immutable triangle BVH; traversal is reentrant and lock-free."""

    node_min: np.ndarray
    node_max: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    node_start: np.ndarray
    node_count: np.ndarray
    tri_v0: np.ndarray
    tri_v1: np.ndarray
    tri_v2: np.ndarray
    tri_plane_p: np.ndarray
    tri_plane_n: np.ndarray
    tri_prim: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.node_min)

    @property
    def n_triangles(self) -> int:
        return len(self.tri_prim)

    def kernel_args(self):
        return (
            self.node_min,
            self.node_max,
            self.node_left,
            self.node_right,
            self.node_start,
            self.node_count,
            self.tri_v0,
            self.tri_v1,
            self.tri_v2,
            self.tri_plane_p,
            self.tri_plane_n,
            self.tri_prim,
        )


def build_bvh(v0, v1, v2, plane_p, plane_n, prim) -> Bvh:
    """Median-split BVH (longest centroid axis, leaves <= 4 triangles)."""
    v0 = np.ascontiguousarray(v0, dtype=np.float64)
    if len(v0) == 0:
        raise ValueError("cannot build a BVH over zero triangles")
    v1 = np.ascontiguousarray(v1, dtype=np.float64)
    v2 = np.ascontiguousarray(v2, dtype=np.float64)
    tmin = np.minimum(np.minimum(v0, v1), v2)
    tmax = np.maximum(np.maximum(v0, v1), v2)
    cent = 0.5 * (tmin + tmax)
    node_min, node_max, left, right, start, count, order = _build_bvh(tmin, tmax, cent)
    return Bvh(
        node_min,
        node_max,
        left,
        right,
        start,
        count,
        np.ascontiguousarray(v0[order]),
        np.ascontiguousarray(v1[order]),
        np.ascontiguousarray(v2[order]),
        np.ascontiguousarray(np.asarray(plane_p, dtype=np.float64)[order]),
        np.ascontiguousarray(np.asarray(plane_n, dtype=np.float64)[order]),
        np.ascontiguousarray(np.asarray(prim, dtype=np.int64)[order]),
    )


def bvh_for_primitives(means, rotations, scales, cutoff: float = CUTOFF_K) -> Bvh:
    return build_bvh(*build_proxy_triangles(means, rotations, scales, cutoff))


def next_hits(
    bvh: Bvh, origin, direction, t_start: float, max_hits: int, idx_start: int | None = None
):
    """First max_hits hits past the cursor, ascending (t, primitive).

    By default only hits with t strictly greater than t_start qualify; to
    resume a stream through exact depth ties, pass the last delivered
    primitive index as idx_start (ties then continue past it)."""
    if max_hits < 1:
        raise ValueError("max_hits must be >= 1")
    if idx_start is None:
        idx_start = np.int64(1) << 62
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    out_t = np.empty(max_hits)
    out_i = np.empty(max_hits, dtype=np.int64)
    stack = np.empty(_STACK_SIZE, dtype=np.int64)
    stack_t = np.empty(_STACK_SIZE)
    n = _next_hits(
        *bvh.kernel_args(),
        o[0],
        o[1],
        o[2],
        d[0],
        d[1],
        d[2],
        t_start,
        idx_start,
        max_hits,
        out_t,
        out_i,
        stack,
        stack_t,
    )
    return out_t[:n].copy(), out_i[:n].copy()


def linear_scan_hits(triangles, origin, direction, t_start: float = 0.0, idx_start: int = -1):
    """Brute-force sorted hit list over raw triangle arrays (the traversal
    oracle; no BVH involved)."""
    v0, v1, v2, pp, pn, prim = (np.ascontiguousarray(a) for a in triangles)
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    out_t = np.empty(len(prim))
    out_i = np.empty(len(prim), dtype=np.int64)
    n = _linear_scan(
        v0,
        v1,
        v2,
        pp,
        pn,
        np.asarray(prim, dtype=np.int64),
        o[0],
        o[1],
        o[2],
        d[0],
        d[1],
        d[2],
        t_start,
        idx_start,
        out_t,
        out_i,
    )
    return out_t[:n].copy(), out_i[:n].copy()
