"""
Sparse voxelization of a triangle scene.

Voxels are half-open along the grid axes, [lo, hi), so a triangle lying in
a grid plane belongs to exactly one layer of voxels. Occupancy is found by
the separating-axis triangle/box test at the finest resolution; each coarser
level is the union of its children, which is the same set an exact test at
that level produces because a parent box is the disjoint union of its
children. Surface area per voxel comes from clipping each triangle against
the voxel box (Sutherland-Hodgman) and measuring the polygon.
"""

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numba import jit, prange

from src.tracer.scene import TriangleScene

MAX_RESOLUTION = 512
BOUNDS_MARGIN = 0.01
MAX_POLY = 10


@dataclass(frozen=True)
class GridSpec:
    """Cubic grid over the world bounds; voxel key = (x * res + y) * res + z."""

    origin: np.ndarray
    size: float
    resolution: int

    @property
    def voxel_size(self) -> float:
        return self.size / self.resolution

    def coords(self, keys: np.ndarray) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64)
        r = self.resolution
        return np.stack([keys // (r * r), (keys // r) % r, keys % r], axis=-1)

    def keys(self, coords: np.ndarray) -> np.ndarray:
        c = np.asarray(coords, dtype=np.int64)
        r = self.resolution
        return (c[..., 0] * r + c[..., 1]) * r + c[..., 2]

    def boxes(self, keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c = self.coords(keys).astype(np.float64)
        vs = self.voxel_size
        return self.origin + c * vs, self.origin + (c + 1.0) * vs

    def child(self) -> "GridSpec":
        return GridSpec(self.origin, self.size, self.resolution * 2)


def world_bounds(scene: TriangleScene) -> tuple[np.ndarray, float]:
    """Cube enclosing the scene with a small margin: (origin, side)."""
    lo, hi = scene.bounds
    side = max(float(np.max(hi - lo)) * (1.0 + BOUNDS_MARGIN), 1e-6)
    center = 0.5 * (lo + hi)
    return center - 0.5 * side, side


@jit(nopython=True, cache=True)
def _axis_separates(ax, ay, az, v0, v1, v2, h):
    p0 = ax * v0[0] + ay * v0[1] + az * v0[2]
    p1 = ax * v1[0] + ay * v1[1] + az * v1[2]
    p2 = ax * v2[0] + ay * v2[1] + az * v2[2]
    r = h[0] * abs(ax) + h[1] * abs(ay) + h[2] * abs(az)
    return min(p0, min(p1, p2)) > r or max(p0, max(p1, p2)) < -r


@jit(nopython=True, cache=True)
def triangle_box_overlap(tri, bmin, bmax):
    """Separating-axis test; box axes are half-open, the other 10 axes closed."""
    for a in range(3):
        lo = min(tri[0, a], min(tri[1, a], tri[2, a]))
        hi = max(tri[0, a], max(tri[1, a], tri[2, a]))
        if lo >= bmax[a] or hi < bmin[a]:
            return False
    c = 0.5 * (bmin + bmax)
    h = 0.5 * (bmax - bmin)
    v0 = tri[0] - c
    v1 = tri[1] - c
    v2 = tri[2] - c
    e0 = v1 - v0
    e1 = v2 - v1
    e2 = v0 - v2
    nx = e0[1] * e1[2] - e0[2] * e1[1]
    ny = e0[2] * e1[0] - e0[0] * e1[2]
    nz = e0[0] * e1[1] - e0[1] * e1[0]
    if _axis_separates(nx, ny, nz, v0, v1, v2, h):
        return False
    for e in (e0, e1, e2):
        # unit axis x edge
        if _axis_separates(0.0, -e[2], e[1], v0, v1, v2, h):
            return False
        if _axis_separates(e[2], 0.0, -e[0], v0, v1, v2, h):
            return False
        if _axis_separates(-e[1], e[0], 0.0, v0, v1, v2, h):
            return False
    return True


@jit(nopython=True, cache=True)
def _cell_range(tri, origin, vs, res):
    lo = np.empty(3, dtype=np.int64)
    hi = np.empty(3, dtype=np.int64)
    for a in range(3):
        tmin = min(tri[0, a], min(tri[1, a], tri[2, a]))
        tmax = max(tri[0, a], max(tri[1, a], tri[2, a]))
        lo[a] = max(int(np.floor((tmin - origin[a]) / vs)) - 1, 0)
        hi[a] = min(int(np.floor((tmax - origin[a]) / vs)) + 1, res - 1)
    return lo, hi


@jit(nopython=True, cache=True, parallel=True)
def _count_pairs(tris, origin, vs, res, counts):
    for t in prange(tris.shape[0]):
        lo, hi = _cell_range(tris[t], origin, vs, res)
        bmin = np.empty(3)
        bmax = np.empty(3)
        n = 0
        for x in range(lo[0], hi[0] + 1):
            for y in range(lo[1], hi[1] + 1):
                for z in range(lo[2], hi[2] + 1):
                    bmin[0] = origin[0] + x * vs
                    bmin[1] = origin[1] + y * vs
                    bmin[2] = origin[2] + z * vs
                    bmax[0] = origin[0] + (x + 1) * vs
                    bmax[1] = origin[1] + (y + 1) * vs
                    bmax[2] = origin[2] + (z + 1) * vs
                    if triangle_box_overlap(tris[t], bmin, bmax):
                        n += 1
        counts[t] = n


@jit(nopython=True, cache=True, parallel=True)
def _fill_pairs(tris, origin, vs, res, offsets, out_keys, out_tri):
    for t in prange(tris.shape[0]):
        lo, hi = _cell_range(tris[t], origin, vs, res)
        bmin = np.empty(3)
        bmax = np.empty(3)
        n = offsets[t]
        for x in range(lo[0], hi[0] + 1):
            for y in range(lo[1], hi[1] + 1):
                for z in range(lo[2], hi[2] + 1):
                    bmin[0] = origin[0] + x * vs
                    bmin[1] = origin[1] + y * vs
                    bmin[2] = origin[2] + z * vs
                    bmax[0] = origin[0] + (x + 1) * vs
                    bmax[1] = origin[1] + (y + 1) * vs
                    bmax[2] = origin[2] + (z + 1) * vs
                    if triangle_box_overlap(tris[t], bmin, bmax):
                        out_keys[n] = (x * res + y) * res + z
                        out_tri[n] = t
                        n += 1


# ---------------------------------------------------------------------------
# Clipping
# ---------------------------------------------------------------------------


@jit(nopython=True, cache=True)
def _clip_plane(src_p, src_b, count, axis, value, keep_above, dst_p, dst_b):
    out = 0
    for i in range(count):
        j = (i + 1) % count
        di = src_p[i, axis] - value
        dj = src_p[j, axis] - value
        if not keep_above:
            di = -di
            dj = -dj
        if di >= 0.0:
            dst_p[out] = src_p[i]
            dst_b[out] = src_b[i]
            out += 1
        if (di >= 0.0) != (dj >= 0.0):
            s = di / (di - dj)
            dst_p[out] = src_p[i] + s * (src_p[j] - src_p[i])
            dst_b[out] = src_b[i] + s * (src_b[j] - src_b[i])
            out += 1
    return out


@jit(nopython=True, cache=True)
def clip_triangle(tri, bmin, bmax, out_p, out_b):
    """
    Clips a triangle to a closed box. Writes polygon vertices and their
    barycentrics (weights of the second and third vertex); returns the
    vertex count.
    """
    pa = np.zeros((MAX_POLY, 3))
    ba = np.zeros((MAX_POLY, 2))
    pb = np.zeros((MAX_POLY, 3))
    bb = np.zeros((MAX_POLY, 2))
    for i in range(3):
        pa[i] = tri[i]
    ba[1, 0] = 1.0
    ba[2, 1] = 1.0
    count = 3
    for axis in range(3):
        count = _clip_plane(pa, ba, count, axis, bmin[axis], True, pb, bb)
        if count < 3:
            return 0
        count = _clip_plane(pb, bb, count, axis, bmax[axis], False, pa, ba)
        if count < 3:
            return 0
    for i in range(count):
        out_p[i] = pa[i]
        out_b[i] = ba[i]
    return count


@jit(nopython=True, cache=True)
def polygon_area(poly, count):
    sx = 0.0
    sy = 0.0
    sz = 0.0
    for i in range(1, count - 1):
        a = poly[i] - poly[0]
        b = poly[i + 1] - poly[0]
        sx += a[1] * b[2] - a[2] * b[1]
        sy += a[2] * b[0] - a[0] * b[2]
        sz += a[0] * b[1] - a[1] * b[0]
    return 0.5 * np.sqrt(sx * sx + sy * sy + sz * sz)


@jit(nopython=True, cache=True, parallel=True)
def _clip_pairs(tris, pair_tri, bmin, bmax, out_count, out_p, out_b, out_area):
    for i in prange(pair_tri.shape[0]):
        n = clip_triangle(tris[pair_tri[i]], bmin[i], bmax[i], out_p[i], out_b[i])
        out_count[i] = n
        out_area[i] = polygon_area(out_p[i], n) if n >= 3 else 0.0


@dataclass
class ClippedPairs:
    count: np.ndarray  # (P,)
    positions: np.ndarray  # (P, MAX_POLY, 3)
    bary: np.ndarray  # (P, MAX_POLY, 2)
    area: np.ndarray  # (P,)


def clip_pairs(triangles: np.ndarray, pair_tri: np.ndarray, box_min: np.ndarray, box_max: np.ndarray) -> ClippedPairs:
    p = len(pair_tri)
    out = ClippedPairs(np.zeros(p, dtype=np.int64), np.zeros((p, MAX_POLY, 3)), np.zeros((p, MAX_POLY, 2)), np.zeros(p))
    if p:
        _clip_pairs(
            np.ascontiguousarray(triangles, dtype=np.float64), np.ascontiguousarray(pair_tri, dtype=np.int64),
            np.ascontiguousarray(box_min, dtype=np.float64), np.ascontiguousarray(box_max, dtype=np.float64),
            out.count, out.positions, out.bary, out.area,
        )
    return out


# ---------------------------------------------------------------------------
# Levels
# ---------------------------------------------------------------------------


@dataclass
class VoxelOccupancy:
    """
    Occupied voxels of one level: sorted keys and, per voxel, the triangles
    intersecting it (CSR ``offsets`` into ``pair_tri``).
    """

    grid: GridSpec
    keys: np.ndarray
    offsets: np.ndarray
    pair_tri: np.ndarray

    @property
    def resolution(self) -> int:
        return self.grid.resolution

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def fraction(self) -> float:
        return len(self.keys) / float(self.resolution ** 3)

    @cached_property
    def pair_voxel(self) -> np.ndarray:
        """Voxel position (index into ``keys``) of every pair."""
        return np.repeat(np.arange(len(self.keys)), np.diff(self.offsets))

    def clip(self, scene: TriangleScene) -> ClippedPairs:
        lo, hi = self.grid.boxes(self.keys[self.pair_voxel])
        return clip_pairs(scene.triangle_positions, self.pair_tri, lo, hi)

    def voxel_areas(self, clipped: ClippedPairs) -> np.ndarray:
        return np.bincount(self.pair_voxel, weights=clipped.area, minlength=len(self.keys))

    def dense(self) -> np.ndarray:
        occ = np.zeros(self.resolution ** 3, dtype=bool)
        occ[self.keys] = True
        return occ.reshape((self.resolution,) * 3)


def _from_pairs(grid: GridSpec, pair_keys: np.ndarray, pair_tri: np.ndarray) -> VoxelOccupancy:
    order = np.lexsort((pair_tri, pair_keys))
    pair_keys = pair_keys[order]
    pair_tri = pair_tri[order]
    if len(pair_keys):
        fresh = np.concatenate([[True], (pair_keys[1:] != pair_keys[:-1]) | (pair_tri[1:] != pair_tri[:-1])])
        pair_keys = pair_keys[fresh]
        pair_tri = pair_tri[fresh]
    keys, starts = np.unique(pair_keys, return_index=True)
    offsets = np.append(starts, len(pair_keys)).astype(np.int64)
    return VoxelOccupancy(grid, keys.astype(np.int64), offsets, pair_tri.astype(np.int64))


def voxelize_level(scene: TriangleScene, grid: GridSpec) -> VoxelOccupancy:
    """Exact occupancy of one resolution by per-triangle candidate testing."""
    tris = np.ascontiguousarray(scene.triangle_positions, dtype=np.float64)
    valid = np.nonzero(scene.triangle_areas > 0.0)[0]
    tris = np.ascontiguousarray(tris[valid])
    counts = np.zeros(len(tris), dtype=np.int64)
    if len(tris):
        _count_pairs(tris, grid.origin, grid.voxel_size, grid.resolution, counts)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    keys = np.zeros(offsets[-1], dtype=np.int64)
    tri = np.zeros(offsets[-1], dtype=np.int64)
    if len(tris):
        _fill_pairs(tris, grid.origin, grid.voxel_size, grid.resolution, offsets, keys, tri)
    return _from_pairs(grid, keys, valid[tri] if len(tri) else tri)


def coarsen(level: VoxelOccupancy) -> VoxelOccupancy:
    """Parent level as the union of child voxels."""
    parent = GridSpec(level.grid.origin, level.grid.size, level.resolution // 2)
    coords = level.grid.coords(level.keys[level.pair_voxel]) // 2
    return _from_pairs(parent, parent.keys(coords), level.pair_tri.copy())


def voxelize(scene: TriangleScene, max_resolution: int, min_resolution: int = 1) -> list[VoxelOccupancy]:
    """Occupancy of every level from min_resolution to max_resolution, coarse to fine."""
    if max_resolution < 1 or max_resolution & (max_resolution - 1) or max_resolution > MAX_RESOLUTION:
        raise ValueError(f"max_resolution must be a power of two <= {MAX_RESOLUTION}, got {max_resolution}")
    origin, side = world_bounds(scene)
    finest = voxelize_level(scene, GridSpec(origin, side, max_resolution))
    levels = [finest]
    while levels[-1].resolution > max(min_resolution, 1):
        levels.append(coarsen(levels[-1]))
    levels.reverse()
    for lvl in levels:
        logging.debug(f"Voxelized {lvl.resolution}^3: {len(lvl)} occupied ({100.0 * lvl.fraction:.2f}%)")
    return levels
