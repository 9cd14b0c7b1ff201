"""Uniform hash-grid nearest neighbors over 3D point sets.

Points are bucketed into cells of fixed edge length (CSR layout keyed by a
linear cell id). Queries expand Chebyshev rings outward; a ring at distance
r can only contain points no closer than (r-1) cell widths, so the search
is exact once the current best beats that bound. The same structure serves
1-NN (Chamfer distance, F-score) and k-NN (normal estimation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

DEFAULT_CELL = 0.5  # meters


@dataclass
class PointGrid:
    points: np.ndarray  # (N, 3), reordered copy grouped by cell
    index: np.ndarray  # original index of each reordered point
    cell_start: np.ndarray  # CSR offsets per occupied-grid linear cell
    origin: np.ndarray
    dims: np.ndarray  # (3,) cell counts
    cell: float


def build_grid(points, cell: float = DEFAULT_CELL) -> PointGrid:
    """Index points into a dense CSR cell table.

    Queries are exact for any cell size, so the requested cell is doubled
    until the table stays at a sane multiple of the point count (tiny cells
    over a wide scene would otherwise allocate gigabytes)."""
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("cannot index an empty point set")
    origin = points.min(axis=0)
    span = points.max(axis=0) - origin
    cell = float(cell)
    max_cells = max(2_000_000, 16 * len(points))
    while np.prod(np.floor(span / cell) + 1) > max_cells:
        cell *= 2.0
    coords = np.floor((points - origin) / cell).astype(np.int64)
    dims = coords.max(axis=0) + 1
    linear = (coords[:, 0] * dims[1] + coords[:, 1]) * dims[2] + coords[:, 2]
    order = np.argsort(linear, kind="stable")
    linear = linear[order]
    n_cells = int(dims[0] * dims[1] * dims[2])
    counts = np.bincount(linear, minlength=n_cells)
    starts = np.zeros(n_cells + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    return PointGrid(
        points=np.ascontiguousarray(points[order]),
        index=order.astype(np.int64),
        cell_start=starts,
        origin=origin,
        dims=dims.astype(np.int64),
        cell=float(cell),
    )


@njit(cache=True, inline="always")
def _nearest_in_cell(points, cell_start, c, qx, qy, qz, best_d2, best_i):
    for j in range(cell_start[c], cell_start[c + 1]):
        dx = points[j, 0] - qx
        dy = points[j, 1] - qy
        dz = points[j, 2] - qz
        d2 = dx * dx + dy * dy + dz * dz
        if d2 < best_d2 or (d2 == best_d2 and j < best_i):
            best_d2 = d2
            best_i = j
    return best_d2, best_i


@njit(cache=True)
def _query_nearest(points, cell_start, origin, dims, cell, qx, qy, qz):
    cx = int(np.floor((qx - origin[0]) / cell))
    cy = int(np.floor((qy - origin[1]) / cell))
    cz = int(np.floor((qz - origin[2]) / cell))
    best_d2 = np.inf
    best_i = np.int64(-1)
    # rings must be able to reach every grid cell from the query's cell
    max_ring = 0
    for c, n in ((cx, dims[0]), (cy, dims[1]), (cz, dims[2])):
        reach = max(abs(c), abs(n - 1 - c))
        if reach > max_ring:
            max_ring = reach
    r = 0
    while r <= max_ring:
        # points in ring r sit at least (r-1) cells away
        if best_i >= 0:
            bound = (r - 1) * cell
            if bound > 0.0 and bound * bound >= best_d2:
                break
        x0 = max(cx - r, 0)
        x1 = min(cx + r, dims[0] - 1)
        y0 = max(cy - r, 0)
        y1 = min(cy + r, dims[1] - 1)
        z0 = max(cz - r, 0)
        z1 = min(cz + r, dims[2] - 1)
        if cx - r > dims[0] - 1 or cx + r < 0:
            x0, x1 = 0, -1
        if cy - r > dims[1] - 1 or cy + r < 0:
            y0, y1 = 0, -1
        if cz - r > dims[2] - 1 or cz + r < 0:
            z0, z1 = 0, -1
        for ix in range(x0, x1 + 1):
            on_x = ix == cx - r or ix == cx + r
            for iy in range(y0, y1 + 1):
                on_y = iy == cy - r or iy == cy + r
                for iz in range(z0, z1 + 1):
                    if r > 0 and not (on_x or on_y or iz == cz - r or iz == cz + r):
                        continue  # interior cell, visited in an earlier ring
                    c = (ix * dims[1] + iy) * dims[2] + iz
                    best_d2, best_i = _nearest_in_cell(
                        points, cell_start, c, qx, qy, qz, best_d2, best_i
                    )
        r += 1
    return best_d2, best_i


@njit(cache=True, parallel=True)
def _query_nearest_batch(points, cell_start, origin, dims, cell, queries, out_d2, out_i):
    for q in prange(len(queries)):
        d2, i = _query_nearest(
            points, cell_start, origin, dims, cell, queries[q, 0], queries[q, 1], queries[q, 2]
        )
        out_d2[q] = d2
        out_i[q] = i


def nearest_neighbors(grid: PointGrid, queries):
    """Exact nearest neighbor of each query: (squared distances, indices
    into the original point array passed to build_grid)."""
    queries = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
    out_d2 = np.empty(len(queries))
    out_i = np.empty(len(queries), dtype=np.int64)
    _query_nearest_batch(
        grid.points, grid.cell_start, grid.origin, grid.dims, grid.cell, queries, out_d2, out_i
    )
    return out_d2, grid.index[out_i]


@njit(cache=True)
def _query_knn(points, cell_start, origin, dims, cell, qx, qy, qz, k, out_d2, out_i):
    cx = int(np.floor((qx - origin[0]) / cell))
    cy = int(np.floor((qy - origin[1]) / cell))
    cz = int(np.floor((qz - origin[2]) / cell))
    n_found = 0
    max_ring = 0
    for c, n in ((cx, dims[0]), (cy, dims[1]), (cz, dims[2])):
        reach = max(abs(c), abs(n - 1 - c))
        if reach > max_ring:
            max_ring = reach
    r = 0
    while r <= max_ring:
        if n_found == k:
            bound = (r - 1) * cell
            if bound > 0.0 and bound * bound >= out_d2[k - 1]:
                break
        x0 = max(cx - r, 0)
        x1 = min(cx + r, dims[0] - 1)
        y0 = max(cy - r, 0)
        y1 = min(cy + r, dims[1] - 1)
        z0 = max(cz - r, 0)
        z1 = min(cz + r, dims[2] - 1)
        if cx - r > dims[0] - 1 or cx + r < 0:
            x0, x1 = 0, -1
        if cy - r > dims[1] - 1 or cy + r < 0:
            y0, y1 = 0, -1
        if cz - r > dims[2] - 1 or cz + r < 0:
            z0, z1 = 0, -1
        for ix in range(x0, x1 + 1):
            on_x = ix == cx - r or ix == cx + r
            for iy in range(y0, y1 + 1):
                on_y = iy == cy - r or iy == cy + r
                for iz in range(z0, z1 + 1):
                    if r > 0 and not (on_x or on_y or iz == cz - r or iz == cz + r):
                        continue
                    c = (ix * dims[1] + iy) * dims[2] + iz
                    for j in range(cell_start[c], cell_start[c + 1]):
                        dx = points[j, 0] - qx
                        dy = points[j, 1] - qy
                        dz = points[j, 2] - qz
                        d2 = dx * dx + dy * dy + dz * dz
                        if n_found == k and d2 >= out_d2[k - 1]:
                            continue
                        pos = n_found
                        while pos > 0 and out_d2[pos - 1] > d2:
                            pos -= 1
                        top = n_found if n_found < k else k - 1
                        for s in range(top, pos, -1):
                            out_d2[s] = out_d2[s - 1]
                            out_i[s] = out_i[s - 1]
                        out_d2[pos] = d2
                        out_i[pos] = j
                        if n_found < k:
                            n_found += 1
        r += 1
    return n_found


@njit(cache=True, parallel=True)
def _query_knn_batch(points, cell_start, origin, dims, cell, queries, k, out_d2, out_i):
    for q in prange(len(queries)):
        _query_knn(
            points,
            cell_start,
            origin,
            dims,
            cell,
            queries[q, 0],
            queries[q, 1],
            queries[q, 2],
            k,
            out_d2[q],
            out_i[q],
        )


def k_nearest_neighbors(grid: PointGrid, queries, k: int):
    """Exact k nearest neighbors per query, ascending squared distance."""
    queries = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
    if k < 1 or k > len(grid.points):
        raise ValueError(f"k = {k} out of range for {len(grid.points)} points")
    out_d2 = np.full((len(queries), k), np.inf)
    out_i = np.zeros((len(queries), k), dtype=np.int64)
    _query_knn_batch(
        grid.points, grid.cell_start, grid.origin, grid.dims, grid.cell, queries, k, out_d2, out_i
    )
    return out_d2, grid.index[out_i]


def nearest_neighbors_brute(points, queries):
    """Quadratic reference used to cross-check the grid."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    d2 = np.sum((queries[:, None, :] - points[None, :, :]) ** 2, axis=2)
    idx = np.argmin(d2, axis=1)
    return d2[np.arange(len(queries)), idx], idx
