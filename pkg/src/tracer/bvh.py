"""
Bounding volume hierarchy over triangles.

Built top-down with a binned surface-area heuristic (at most MAX_LEAF
triangles per leaf) and traversed with the watertight ray/triangle test, so
rays through shared edges or vertices never slip between triangles. Build
and queries are numba kernels; queries run in parallel over rays.
"""

import logging
from dataclasses import dataclass

import numpy as np
from numba import jit, prange

MAX_LEAF = 4
SAH_BINS = 16
DEGENERATE_AREA = 1e-20


@jit(nopython=True, cache=True)
def _build(tri_min, tri_max, centroids, max_leaf, bins):
    n = centroids.shape[0]
    order = np.arange(n)
    cap = max(2 * n, 1)
    node_min = np.zeros((cap, 3))
    node_max = np.zeros((cap, 3))
    node_left = np.full(cap, -1, dtype=np.int64)
    node_start = np.zeros(cap, dtype=np.int64)
    node_count = np.zeros(cap, dtype=np.int64)
    stack = np.zeros((cap, 4), dtype=np.int64)
    depth = 0
    used = 1
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n
    stack[0, 3] = 1
    sp = 1
    bin_min = np.zeros((bins, 3))
    bin_max = np.zeros((bins, 3))
    bin_cnt = np.zeros(bins, dtype=np.int64)
    right_area = np.zeros(bins)
    right_cnt = np.zeros(bins, dtype=np.int64)

    while sp > 0:
        sp -= 1
        node = stack[sp, 0]
        lo = stack[sp, 1]
        hi = stack[sp, 2]
        level = stack[sp, 3]
        depth = max(depth, level)
        count = hi - lo
        bmin = np.full(3, np.inf)
        bmax = np.full(3, -np.inf)
        cmin = np.full(3, np.inf)
        cmax = np.full(3, -np.inf)
        for i in range(lo, hi):
            t = order[i]
            for a in range(3):
                bmin[a] = min(bmin[a], tri_min[t, a])
                bmax[a] = max(bmax[a], tri_max[t, a])
                cmin[a] = min(cmin[a], centroids[t, a])
                cmax[a] = max(cmax[a], centroids[t, a])
        node_min[node] = bmin
        node_max[node] = bmax
        node_start[node] = lo
        node_count[node] = count
        if count <= max_leaf:
            continue

        best_axis = -1
        best_split = 0
        best_cost = np.inf
        for a in range(3):
            extent = cmax[a] - cmin[a]
            if extent <= 1e-12:
                continue
            bin_cnt[:] = 0
            bin_min[:] = np.inf
            bin_max[:] = -np.inf
            for i in range(lo, hi):
                t = order[i]
                b = min(int((centroids[t, a] - cmin[a]) / extent * bins), bins - 1)
                bin_cnt[b] += 1
                for k in range(3):
                    bin_min[b, k] = min(bin_min[b, k], tri_min[t, k])
                    bin_max[b, k] = max(bin_max[b, k], tri_max[t, k])
            rmin = np.full(3, np.inf)
            rmax = np.full(3, -np.inf)
            rc = 0
            for b in range(bins - 1, 0, -1):
                rc += bin_cnt[b]
                for k in range(3):
                    rmin[k] = min(rmin[k], bin_min[b, k])
                    rmax[k] = max(rmax[k], bin_max[b, k])
                d = rmax - rmin
                right_area[b] = 2.0 * (d[0] * d[1] + d[1] * d[2] + d[0] * d[2]) if rc > 0 else 0.0
                right_cnt[b] = rc
            lmin = np.full(3, np.inf)
            lmax = np.full(3, -np.inf)
            lc = 0
            for b in range(bins - 1):
                lc += bin_cnt[b]
                for k in range(3):
                    lmin[k] = min(lmin[k], bin_min[b, k])
                    lmax[k] = max(lmax[k], bin_max[b, k])
                if lc == 0 or right_cnt[b + 1] == 0:
                    continue
                d = lmax - lmin
                left_area = 2.0 * (d[0] * d[1] + d[1] * d[2] + d[0] * d[2])
                cost = left_area * lc + right_area[b + 1] * right_cnt[b + 1]
                if cost < best_cost:
                    best_cost = cost
                    best_axis = a
                    best_split = b

        mid = lo
        if best_axis >= 0:
            extent = cmax[best_axis] - cmin[best_axis]
            i = lo
            j = hi - 1
            while i <= j:
                t = order[i]
                b = min(int((centroids[t, best_axis] - cmin[best_axis]) / extent * bins), bins - 1)
                if b <= best_split:
                    i += 1
                else:
                    order[i] = order[j]
                    order[j] = t
                    j -= 1
            mid = i
        if mid == lo or mid == hi:
            # coincident centroids: split the range in half
            mid = lo + count // 2

        left = used
        used += 2
        node_left[node] = left
        stack[sp, 0] = left
        stack[sp, 1] = lo
        stack[sp, 2] = mid
        stack[sp, 3] = level + 1
        stack[sp + 1, 0] = left + 1
        stack[sp + 1, 1] = mid
        stack[sp + 1, 2] = hi
        stack[sp + 1, 3] = level + 1
        sp += 2

    return depth, order, node_min[:used], node_max[:used], node_left[:used], node_start[:used], node_count[:used]


@jit(nopython=True, cache=True)
def _ray_setup(d):
    kz = 0
    if abs(d[1]) > abs(d[kz]):
        kz = 1
    if abs(d[2]) > abs(d[kz]):
        kz = 2
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    if d[kz] < 0.0:
        kx, ky = ky, kx
    return kx, ky, kz, d[kx] / d[kz], d[ky] / d[kz], 1.0 / d[kz]


@jit(nopython=True, cache=True)
def _watertight(o, kx, ky, kz, sx, sy, sz, v0, v1, v2, t_min, t_max):
    """(t, b1, b2) with b1, b2 the weights of v1 and v2; t = -1 on a miss."""
    a0 = v0[kz] - o[kz]
    b0 = v1[kz] - o[kz]
    c0 = v2[kz] - o[kz]
    ax = v0[kx] - o[kx] - sx * a0
    ay = v0[ky] - o[ky] - sy * a0
    bx = v1[kx] - o[kx] - sx * b0
    by = v1[ky] - o[ky] - sy * b0
    cx = v2[kx] - o[kx] - sx * c0
    cy = v2[ky] - o[ky] - sy * c0
    u = cx * by - cy * bx
    v = ax * cy - ay * cx
    w = bx * ay - by * ax
    if (u < 0.0 or v < 0.0 or w < 0.0) and (u > 0.0 or v > 0.0 or w > 0.0):
        return -1.0, 0.0, 0.0
    det = u + v + w
    if det == 0.0:
        return -1.0, 0.0, 0.0
    t = (u * sz * a0 + v * sz * b0 + w * sz * c0) / det
    if t <= t_min or t >= t_max:
        return -1.0, 0.0, 0.0
    return t, v / det, w / det


@jit(nopython=True, cache=True)
def _slab(bmin, bmax, o, inv, t_min, t_max):
    lo = t_min
    hi = t_max
    for a in range(3):
        t0 = (bmin[a] - o[a]) * inv[a]
        t1 = (bmax[a] - o[a]) * inv[a]
        if t0 > t1:
            t0, t1 = t1, t0
        # far bound widened by two ulps so grazing boxes are not culled
        t1 += abs(t1) * 4.440892098500626e-16
        if t0 > lo:
            lo = t0
        if t1 < hi:
            hi = t1
        if lo > hi:
            return False
    return True


@jit(nopython=True, cache=True)
def _trace_one(o, d, t_min, t_max, any_hit, stack_size, order, node_min, node_max, node_left, node_start, node_count, tris):
    kx, ky, kz, sx, sy, sz = _ray_setup(d)
    inv = np.empty(3)
    for a in range(3):
        inv[a] = 1.0 / d[a] if d[a] != 0.0 else np.inf
    best_t = t_max
    best_tri = -1
    best_b1 = 0.0
    best_b2 = 0.0
    stack = np.empty(stack_size, dtype=np.int64)
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if not _slab(node_min[node], node_max[node], o, inv, t_min, best_t):
            continue
        left = node_left[node]
        if left >= 0:
            stack[sp] = left
            stack[sp + 1] = left + 1
            sp += 2
            continue
        for i in range(node_start[node], node_start[node] + node_count[node]):
            tri = order[i]
            t, b1, b2 = _watertight(o, kx, ky, kz, sx, sy, sz, tris[tri, 0], tris[tri, 1], tris[tri, 2], t_min, best_t)
            if t >= 0.0:
                best_t = t
                best_tri = tri
                best_b1 = b1
                best_b2 = b2
                if any_hit:
                    return best_tri, best_t, best_b1, best_b2
    return best_tri, best_t, best_b1, best_b2


@jit(nopython=True, cache=True, parallel=True, nogil=True)
def _intersect_kernel(origins, directions, t_min, t_max, any_hit, stack_size,
                      order, node_min, node_max, node_left, node_start, node_count, tris,
                      out_tri, out_t, out_b):
    for r in prange(origins.shape[0]):
        tri, t, b1, b2 = _trace_one(
            origins[r], directions[r], t_min[r], t_max[r], any_hit, stack_size,
            order, node_min, node_max, node_left, node_start, node_count, tris,
        )
        out_tri[r] = tri
        out_t[r] = t
        out_b[r, 0] = b1
        out_b[r, 1] = b2


@jit(nopython=True, cache=True, parallel=True, nogil=True)
def _brute_force_kernel(origins, directions, t_min, t_max, tris, out_tri, out_t, out_b):
    for r in prange(origins.shape[0]):
        o = origins[r]
        kx, ky, kz, sx, sy, sz = _ray_setup(directions[r])
        best = t_max[r]
        for tri in range(tris.shape[0]):
            t, b1, b2 = _watertight(o, kx, ky, kz, sx, sy, sz, tris[tri, 0], tris[tri, 1], tris[tri, 2], t_min[r], best)
            if t >= 0.0:
                best = t
                out_tri[r] = tri
                out_t[r] = t
                out_b[r, 0] = b1
                out_b[r, 1] = b2


@dataclass
class HitBatch:
    """Nearest hits of a ray batch; ``triangle`` is -1 and ``t`` is t_max on a miss."""

    triangle: np.ndarray
    t: np.ndarray
    bary: np.ndarray  # (N, 2) weights of the second and third vertex

    @property
    def hit(self) -> np.ndarray:
        return self.triangle >= 0

    def __len__(self) -> int:
        return len(self.triangle)


def _ray_arrays(origins, directions, t_min, t_max):
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    t_min = np.ascontiguousarray(np.broadcast_to(np.asarray(t_min, dtype=np.float64), (n,)))
    t_max = np.ascontiguousarray(np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,)))
    return origins, directions, t_min, t_max


@dataclass(frozen=True)
class Bvh:
    """
    Immutable after build. Triangle ids in results refer to the input
    triangle array; degenerate triangles are never reported.
    """

    triangles: np.ndarray  # (T, 3, 3) all input triangles
    order: np.ndarray  # leaf order, input triangle ids
    node_min: np.ndarray
    node_max: np.ndarray
    node_left: np.ndarray
    node_start: np.ndarray
    node_count: np.ndarray
    depth: int
    skipped: int = 0

    @classmethod
    def build(cls, triangles: np.ndarray) -> "Bvh":
        triangles = np.ascontiguousarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
        area = 0.5 * np.linalg.norm(np.cross(triangles[:, 1] - triangles[:, 0], triangles[:, 2] - triangles[:, 0]), axis=-1)
        finite = np.all(np.isfinite(triangles), axis=(1, 2))
        valid = np.nonzero((area > DEGENERATE_AREA) & finite)[0]
        skipped = len(triangles) - len(valid)
        if skipped:
            logging.warning(f"BVH build skipped {skipped} degenerate triangle(s)")
        sub = triangles[valid]
        depth, order, node_min, node_max, node_left, node_start, node_count = _build(
            sub.min(axis=1) if len(sub) else np.zeros((0, 3)),
            sub.max(axis=1) if len(sub) else np.zeros((0, 3)),
            sub.mean(axis=1) if len(sub) else np.zeros((0, 3)),
            MAX_LEAF,
            SAH_BINS,
        )
        logging.debug(f"BVH: {len(valid)} triangles, {len(node_min)} nodes, depth {depth}")
        return cls(triangles, valid[order], node_min, node_max, node_left, node_start, node_count, int(depth), skipped)

    def _query(self, origins, directions, t_min, t_max, any_hit: bool) -> HitBatch:
        origins, directions, t_min, t_max = _ray_arrays(origins, directions, t_min, t_max)
        n = len(origins)
        out_tri = np.full(n, -1, dtype=np.int64)
        out_t = t_max.copy()
        out_b = np.zeros((n, 2))
        if n and len(self.order):
            _intersect_kernel(
                origins, directions, t_min, t_max, any_hit, self.depth + 2,
                self.order, self.node_min, self.node_max, self.node_left, self.node_start, self.node_count,
                self.triangles, out_tri, out_t, out_b,
            )
        return HitBatch(out_tri, out_t, out_b)

    def intersect(self, origins, directions, t_min=0.0, t_max=np.inf) -> HitBatch:
        """Nearest hit with t in (t_min, t_max)."""
        return self._query(origins, directions, t_min, t_max, any_hit=False)

    def occluded(self, origins, directions, t_min=0.0, t_max=np.inf) -> np.ndarray:
        """True where any triangle is hit with t in (t_min, t_max)."""
        return self._query(origins, directions, t_min, t_max, any_hit=True).hit


def build_bvh(scene) -> Bvh:
    return Bvh.build(scene.triangle_positions)


def intersect_brute_force(triangles: np.ndarray, origins, directions, t_min=0.0, t_max=np.inf) -> HitBatch:
    """Tests every triangle; the oracle for ``Bvh.intersect``."""
    triangles = np.ascontiguousarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
    origins, directions, t_min, t_max = _ray_arrays(origins, directions, t_min, t_max)
    n = len(origins)
    out_tri = np.full(n, -1, dtype=np.int64)
    out_t = t_max.copy()
    out_b = np.zeros((n, 2))
    area = 0.5 * np.linalg.norm(np.cross(triangles[:, 1] - triangles[:, 0], triangles[:, 2] - triangles[:, 0]), axis=-1)
    keep = np.nonzero(area > DEGENERATE_AREA)[0]
    if n and len(keep):
        sub_tri = np.full(n, -1, dtype=np.int64)
        _brute_force_kernel(origins, directions, t_min, t_max, np.ascontiguousarray(triangles[keep]), sub_tri, out_t, out_b)
        out_tri = np.where(sub_tri >= 0, keep[np.maximum(sub_tri, 0)], -1)
    return HitBatch(out_tri, out_t, out_b)
