"""
Cone traversal of the sparse multi-level grid.

Each cone's center ray is walked with a 3D DDA (Amanatides-Woo). The level
is chosen from the distance travelled, floor(log2(tan(theta/2) t / s)) with
s the finest voxel size, and changes only where the ray crosses a boundary
of the coarser of the two levels. Every occupied voxel visited becomes a
(cone, level, voxel) pair; the first one also records the face it was
entered through.
"""

from dataclasses import dataclass

import numpy as np
from numba import jit, prange


def select_level(t, aperture, base_size: float, levels: int):
    """Level index (0 = finest) for distance ``t``, clamped to the available levels."""
    t = np.asarray(t, dtype=np.float64)
    ratio = np.tan(0.5 * np.asarray(aperture, dtype=np.float64)) * t / base_size
    with np.errstate(divide="ignore", invalid="ignore"):
        lvl = np.floor(np.log2(np.where(ratio >= 1.0, ratio, 1.0)))
    out = np.clip(lvl, 0, levels - 1).astype(np.int64)
    return int(out) if out.ndim == 0 else out


@jit(nopython=True, cache=True)
def _select(t, tan_half, base, levels):
    ratio = tan_half * t / base
    if not ratio >= 1.0:
        return 0
    lvl = int(np.floor(np.log2(ratio)))
    return min(lvl, levels - 1)


@jit(nopython=True, cache=True)
def _find(keys, start, end, key):
    lo = start
    hi = end
    while lo < hi:
        mid = (lo + hi) // 2
        if keys[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    if lo < end and keys[lo] == key:
        return lo - start
    return -1


@jit(nopython=True, cache=True)
def _setup(o, d, origin, vs, cell, step, t_max, t_delta):
    for a in range(3):
        if d[a] > 0.0:
            step[a] = 1
            t_max[a] = (origin[a] + (cell[a] + 1) * vs - o[a]) / d[a]
            t_delta[a] = vs / d[a]
        elif d[a] < 0.0:
            step[a] = -1
            t_max[a] = (origin[a] + cell[a] * vs - o[a]) / d[a]
            t_delta[a] = -vs / d[a]
        else:
            step[a] = 0
            t_max[a] = np.inf
            t_delta[a] = np.inf


@jit(nopython=True, cache=True)
def _trace_one(o, d, tan_half, origin, size, finest, levels, keys, offsets, forced, capacity,
               out_level, out_index):
    """Returns (pairs, overflow, first level, first index, first face)."""
    t0 = 0.0
    t1 = np.inf
    enter_axis = -1
    for a in range(3):
        if d[a] != 0.0:
            ta = (origin[a] - o[a]) / d[a]
            tb = (origin[a] + size - o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
                enter_axis = a
            t1 = min(t1, tb)
        elif o[a] < origin[a] or o[a] >= origin[a] + size:
            t1 = -1.0
    if not t1 > t0:
        return 0, 0, -1, -1, -1

    base = size / finest
    level = forced if forced >= 0 else _select(t0, tan_half, base, levels)
    res = finest >> level
    vs = base * (1 << level)
    cell = np.empty(3, dtype=np.int64)
    step = np.empty(3, dtype=np.int64)
    t_max = np.empty(3)
    t_delta = np.empty(3)
    for a in range(3):
        c = int(np.floor((o[a] + d[a] * t0 - origin[a]) / vs))
        cell[a] = min(max(c, 0), res - 1)
    if enter_axis >= 0:
        cell[enter_axis] = 0 if d[enter_axis] > 0.0 else res - 1
    _setup(o, d, origin, vs, cell, step, t_max, t_delta)

    count = 0
    overflow = 0
    first_level = -1
    first_index = -1
    first_face = -1
    axis = enter_axis
    while True:
        key = (cell[0] * res + cell[1]) * res + cell[2]
        idx = _find(keys, offsets[level], offsets[level + 1], key)
        if idx >= 0:
            if first_level < 0:
                first_level = level
                first_index = idx
                if axis >= 0:
                    first_face = 2 * axis + (0 if d[axis] > 0.0 else 1)
            if count < capacity:
                out_level[count] = level
                out_index[count] = idx
                count += 1
            else:
                overflow += 1

        a = 0
        if t_max[1] < t_max[a]:
            a = 1
        if t_max[2] < t_max[a]:
            a = 2
        t_next = t_max[a]
        if t_next >= t1:
            break
        cell[a] += step[a]
        if cell[a] < 0 or cell[a] >= res:
            break
        t_max[a] += t_delta[a]
        axis = a
        if forced >= 0:
            continue

        want = _select(t_next, tan_half, base, levels)
        if want < level:
            f = 1 << (level - want)
            level = want
            res = finest >> level
            vs = base * (1 << level)
            for b in range(3):
                lo = cell[b] * f
                c = int(np.floor((o[b] + d[b] * t_next - origin[b]) / vs))
                cell[b] = min(max(c, lo), lo + f - 1)
            if step[a] > 0:
                cell[a] = (cell[a] // f) * f
            else:
                cell[a] = (cell[a] // f) * f + f - 1
            _setup(o, d, origin, vs, cell, step, t_max, t_delta)
        elif want > level:
            target = level
            for j in range(want, level, -1):
                f = 1 << (j - level)
                if step[a] > 0:
                    aligned = cell[a] % f == 0
                else:
                    aligned = (cell[a] + 1) % f == 0
                if aligned:
                    target = j
                    break
            if target > level:
                f = 1 << (target - level)
                for b in range(3):
                    cell[b] = cell[b] // f
                level = target
                res = finest >> level
                vs = base * (1 << level)
                _setup(o, d, origin, vs, cell, step, t_max, t_delta)
    return count, overflow, first_level, first_index, first_face


@jit(nopython=True, cache=True, parallel=True, nogil=True)
def _trace_kernel(origins, dirs, tan_half, origin, size, finest, levels, keys, offsets, forced, capacity,
                  out_level, out_index, out_count, out_overflow, first_level, first_index, first_face):
    for c in prange(origins.shape[0]):
        n, over, fl, fi, ff = _trace_one(
            origins[c], dirs[c], tan_half, origin, size, finest, levels, keys, offsets, forced, capacity,
            out_level[c], out_index[c],
        )
        out_count[c] = n
        out_overflow[c] = over
        first_level[c] = fl
        first_index[c] = fi
        first_face[c] = ff


@dataclass
class ConePairs:
    """Flattened (cone, level, voxel) pairs plus the first occupied voxel per cone."""

    cone: np.ndarray
    level: np.ndarray
    index: np.ndarray
    first_level: np.ndarray
    first_index: np.ndarray
    first_face: np.ndarray
    overflow: int

    def __len__(self) -> int:
        return len(self.cone)


@dataclass(frozen=True)
class LevelIndex:
    """Sorted voxel keys of every level, finest first, concatenated."""

    origin: np.ndarray
    size: float
    finest: int
    keys: np.ndarray
    offsets: np.ndarray

    @property
    def levels(self) -> int:
        return len(self.offsets) - 1

    @property
    def base_size(self) -> float:
        return self.size / self.finest

    @classmethod
    def from_keys(cls, origin, size: float, finest: int, keys_fine_to_coarse: list) -> "LevelIndex":
        offsets = np.concatenate([[0], np.cumsum([len(k) for k in keys_fine_to_coarse])]).astype(np.int64)
        keys = np.concatenate([np.asarray(k, dtype=np.int64) for k in keys_fine_to_coarse]) if keys_fine_to_coarse else np.zeros(0, np.int64)
        return cls(np.asarray(origin, dtype=np.float64), float(size), int(finest), keys, offsets)


def trace_pairs(index: LevelIndex, origins: np.ndarray, dirs: np.ndarray, aperture: float,
                capacity: int = 512, forced_level: int = -1) -> ConePairs:
    n = len(origins)
    out_level = np.zeros((n, capacity), dtype=np.int64)
    out_index = np.zeros((n, capacity), dtype=np.int64)
    out_count = np.zeros(n, dtype=np.int64)
    out_overflow = np.zeros(n, dtype=np.int64)
    first_level = np.full(n, -1, dtype=np.int64)
    first_index = np.full(n, -1, dtype=np.int64)
    first_face = np.full(n, -1, dtype=np.int64)
    forced = min(forced_level, index.levels - 1) if forced_level >= 0 else -1
    if n:
        _trace_kernel(
            np.ascontiguousarray(origins, dtype=np.float64), np.ascontiguousarray(dirs, dtype=np.float64),
            float(np.tan(0.5 * aperture)), index.origin, index.size, index.finest, index.levels,
            index.keys, index.offsets, forced, capacity,
            out_level, out_index, out_count, out_overflow, first_level, first_index, first_face,
        )
    mask = np.arange(capacity)[None, :] < out_count[:, None]
    cone = np.repeat(np.arange(n), out_count)
    return ConePairs(cone, out_level[mask], out_index[mask], first_level, first_index, first_face, int(out_overflow.sum()))
