"""
Haar-wavelet visibility maps over the sphere (AIV, equal-area, 32^2) and
the hemisphere (ABV, concentric, 64^2).

Coefficients use the non-standard (pyramid) orthonormal 2D Haar layout in
a res x res array: [0, 0] is the scaling coefficient and, for every
approximation size n = 1, 2, ..., res/2, the blocks [0:n, n:2n],
[n:2n, 0:n] and [n:2n, n:2n] hold the horizontal, vertical and diagonal
details. Maps are stored sparsely as sorted flat indices with float32
values; single texels are reconstructed by walking the implicit quadtree
from the root, using the same arithmetic as the full inverse so both give
identical floats.
"""

from dataclasses import dataclass
from typing import Literal, Optional, Union

import numpy as np
from numba import jit

from src.core.cpca import cpca_fit
from src.core.spherical import (
    concentric_hemisphere_to_square,
    equal_area_sphere_to_square,
    square_to_texel,
)

AIV_RESOLUTION = 32
ABV_RESOLUTION = 64
CPCA_TILES = 4
Domain = Literal["sphere", "hemisphere", "tile"]


def _levels(resolution: int) -> int:
    if resolution < 1 or resolution & (resolution - 1):
        raise ValueError(f"Haar grids must be power-of-two sized, got {resolution}")
    return resolution.bit_length() - 1


# ---------------------------------------------------------------------------
# Dense transforms
# ---------------------------------------------------------------------------


def haar_forward(grid: np.ndarray) -> np.ndarray:
    """Orthonormal non-standard 2D Haar transform of (..., res, res) grids."""
    a = np.array(grid, dtype=np.float64)
    if a.shape[-1] != a.shape[-2]:
        raise ValueError("Haar grids must be square")
    _levels(a.shape[-1])
    n = a.shape[-1]
    while n > 1:
        h = n // 2
        block = a[..., :n, :n]
        p00 = block[..., 0::2, 0::2]
        p01 = block[..., 0::2, 1::2]
        p10 = block[..., 1::2, 0::2]
        p11 = block[..., 1::2, 1::2]
        avg = (p00 + p01 + p10 + p11) * 0.5
        dh = (p00 - p01 + p10 - p11) * 0.5
        dv = (p00 + p01 - p10 - p11) * 0.5
        dd = (p00 - p01 - p10 + p11) * 0.5
        a[..., :h, :h] = avg
        a[..., :h, h:n] = dh
        a[..., h:n, :h] = dv
        a[..., h:n, h:n] = dd
        n = h
    return a


def haar_inverse(coefficients: np.ndarray) -> np.ndarray:
    c = np.asarray(coefficients, dtype=np.float64)
    res = c.shape[-1]
    _levels(res)
    out = c[..., :1, :1].copy()
    n = 1
    while n < res:
        dh = c[..., :n, n:2 * n]
        dv = c[..., n:2 * n, :n]
        dd = c[..., n:2 * n, n:2 * n]
        finer = np.empty(c.shape[:-2] + (2 * n, 2 * n))
        for qr in (0, 1):
            for qc in (0, 1):
                sh = 1.0 if qc == 0 else -1.0
                sv = 1.0 if qr == 0 else -1.0
                finer[..., qr::2, qc::2] = (out + sh * dh + sv * dv + (sh * sv) * dd) * 0.5
        out = finer
        n *= 2
    return out


# ---------------------------------------------------------------------------
# Sparse random access
# ---------------------------------------------------------------------------


@jit(nopython=True, cache=True)
def _coefficient(indices, values, start, end, key):
    lo = start
    hi = end
    while lo < hi:
        mid = (lo + hi) // 2
        if indices[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    if lo < end and indices[lo] == key:
        return np.float64(values[lo])
    return 0.0


@jit(nopython=True, cache=True)
def _eval_sparse(mean, indices, values, start, end, res, levels, row, col):
    v = np.float64(mean)
    n = 1
    for lvl in range(levels):
        shift = levels - lvl - 1
        r = row >> (shift + 1)
        c = col >> (shift + 1)
        qr = (row >> shift) & 1
        qc = (col >> shift) & 1
        dh = _coefficient(indices, values, start, end, r * res + n + c)
        dv = _coefficient(indices, values, start, end, (n + r) * res + c)
        dd = _coefficient(indices, values, start, end, (n + r) * res + n + c)
        sh = 1.0 if qc == 0 else -1.0
        sv = 1.0 if qr == 0 else -1.0
        v = (v + sh * dh + sv * dv + (sh * sv) * dd) * 0.5
        n *= 2
    return v


@jit(nopython=True, cache=True)
def _eval_set(means, offsets, indices, values, res, levels, items, rows, cols, out):
    for q in range(items.shape[0]):
        i = items[q]
        v = _eval_sparse(means[i], indices, values, offsets[i], offsets[i + 1], res, levels, rows[q], cols[q])
        out[q] = min(max(v, 0.0), 1.0)


def direction_texels(domain: Domain, resolution: int, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Texel (row, col) of directions; hemisphere maps take face-local directions with z >= 0."""
    if domain == "hemisphere":
        square = concentric_hemisphere_to_square(directions)
    else:
        square = equal_area_sphere_to_square(directions)
    return square_to_texel(square, resolution)


@dataclass(frozen=True)
class SphereWaveletMap:
    domain: str
    resolution: int
    mean: float
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.domain not in ("sphere", "hemisphere", "tile"):
            raise ValueError(f"Unknown map domain {self.domain!r}")
        _levels(self.resolution)
        indices = np.asarray(self.indices, dtype=np.int32).reshape(-1)
        values = np.asarray(self.values, dtype=np.float32).reshape(-1)
        if len(indices) != len(values):
            raise ValueError("SphereWaveletMap indices and values differ in length")
        order = np.argsort(indices, kind="stable")
        object.__setattr__(self, "indices", indices[order])
        object.__setattr__(self, "values", values[order])
        object.__setattr__(self, "mean", float(np.float32(self.mean)))

    @property
    def levels(self) -> int:
        return _levels(self.resolution)

    @property
    def kept(self) -> int:
        """Stored coefficients including the scaling coefficient."""
        return 1 + len(self.indices)

    @classmethod
    def from_grid(cls, grid: np.ndarray, domain: Domain) -> "SphereWaveletMap":
        coeffs = haar_forward(grid)
        res = coeffs.shape[-1]
        flat = coeffs.reshape(-1).copy()
        mean = flat[0]
        flat[0] = 0.0
        idx = np.nonzero(flat)[0]
        return cls(domain, res, mean, idx, flat[idx])

    def coefficients(self) -> np.ndarray:
        flat = np.zeros(self.resolution * self.resolution)
        flat[self.indices] = self.values.astype(np.float64)
        flat[0] = np.float64(np.float32(self.mean))
        return flat.reshape(self.resolution, self.resolution)

    def to_grid(self, clamp: bool = True) -> np.ndarray:
        grid = haar_inverse(self.coefficients())
        return np.clip(grid, 0.0, 1.0) if clamp else grid

    def norm(self) -> float:
        return float(np.sqrt(np.float64(self.mean) ** 2 + np.sum(self.values.astype(np.float64) ** 2)))


def eval_texel(m: SphereWaveletMap, row, col) -> np.ndarray:
    rows = np.atleast_1d(np.asarray(row, dtype=np.int64))
    cols = np.atleast_1d(np.asarray(col, dtype=np.int64))
    out = np.empty(len(rows))
    _eval_set(
        np.array([m.mean], dtype=np.float32), np.array([0, len(m.indices)], dtype=np.int64),
        m.indices, m.values, m.resolution, m.levels, np.zeros(len(rows), dtype=np.int64), rows, cols, out,
    )
    return out if np.ndim(row) else float(out[0])


def eval_direction(m: SphereWaveletMap, omega: np.ndarray):
    """Visibility in [0, 1] toward omega without reconstructing the map."""
    row, col = direction_texels(m.domain, m.resolution, omega)
    return eval_texel(m, row, col)


def reconstruction_accuracy(reference: np.ndarray, approximation: np.ndarray) -> float:
    """1 - |approx - reference| / |reference| in L2, mean included."""
    norm = float(np.linalg.norm(reference))
    if norm == 0.0:
        return 1.0 if float(np.linalg.norm(approximation)) == 0.0 else 0.0
    return 1.0 - float(np.linalg.norm(approximation - reference)) / norm


def truncate(m: SphereWaveletMap, max_keep_fraction: float = 0.10, accuracy_floor: float = 0.95) -> SphereWaveletMap:
    """
    Keeps the largest-magnitude coefficients: as few as reach the accuracy
    floor, never more than the coefficient cap (scaling coefficient counted).
    The error is measured in coefficient space, which equals the grid error
    for the orthonormal transform.
    """
    cap = max(1, int(np.floor(max_keep_fraction * m.resolution * m.resolution)))
    values = m.values.astype(np.float64)
    order = np.argsort(-np.abs(values), kind="stable")
    energy = np.float64(m.mean) ** 2 + np.sum(values ** 2)
    if energy == 0.0:
        return SphereWaveletMap(m.domain, m.resolution, m.mean, [], [])
    sorted_sq = values[order] ** 2
    # dropped energy when keeping the first k details, k = 0..len
    dropped = np.concatenate([[np.sum(sorted_sq)], np.sum(sorted_sq) - np.cumsum(sorted_sq)])
    accuracy = 1.0 - np.sqrt(np.maximum(dropped, 0.0) / energy)
    ok = np.nonzero(accuracy >= accuracy_floor)[0]
    keep = int(ok[0]) if len(ok) else len(values)
    keep = min(keep, cap - 1)
    chosen = order[:keep]
    return SphereWaveletMap(m.domain, m.resolution, m.mean, m.indices[chosen], m.values[chosen])


# ---------------------------------------------------------------------------
# Map collections
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WaveletMapSet:
    """Many sparse maps of one resolution packed CSR-style."""

    domain: str
    resolution: int
    means: np.ndarray
    offsets: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.means)

    @classmethod
    def from_maps(cls, maps: list, domain: str, resolution: int) -> "WaveletMapSet":
        counts = [len(m.indices) for m in maps]
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return cls(
            domain,
            resolution,
            np.array([m.mean for m in maps], dtype=np.float32),
            offsets,
            np.concatenate([m.indices for m in maps]).astype(np.int32) if maps else np.zeros(0, dtype=np.int32),
            np.concatenate([m.values for m in maps]).astype(np.float32) if maps else np.zeros(0, dtype=np.float32),
        )

    def get(self, i: int) -> SphereWaveletMap:
        s, e = self.offsets[i], self.offsets[i + 1]
        return SphereWaveletMap(self.domain, self.resolution, self.means[i], self.indices[s:e], self.values[s:e])

    def evaluate_texels(self, items, rows, cols) -> np.ndarray:
        items = np.ascontiguousarray(items, dtype=np.int64)
        out = np.empty(len(items))
        if len(items):
            _eval_set(
                self.means, self.offsets, self.indices, self.values, self.resolution, _levels(self.resolution),
                items, np.ascontiguousarray(rows, dtype=np.int64), np.ascontiguousarray(cols, dtype=np.int64), out,
            )
        return out

    def evaluate(self, items, directions) -> np.ndarray:
        row, col = direction_texels(self.domain, self.resolution, directions)
        return self.evaluate_texels(items, row, col)

    def grid(self, i: int) -> np.ndarray:
        return self.get(i).to_grid()

    @property
    def nbytes(self) -> int:
        return int(self.means.nbytes + self.offsets.nbytes + self.indices.nbytes + self.values.nbytes)

    def to_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.means": self.means,
            f"{prefix}.offsets": self.offsets,
            f"{prefix}.indices": self.indices,
            f"{prefix}.values": self.values,
        }

    @classmethod
    def from_arrays(cls, arrays: dict, prefix: str, domain: str, resolution: int) -> "WaveletMapSet":
        return cls(
            domain, resolution,
            arrays[f"{prefix}.means"], arrays[f"{prefix}.offsets"],
            arrays[f"{prefix}.indices"], arrays[f"{prefix}.values"],
        )


@jit(nopython=True, cache=True)
def _eval_cpca(
    labels, constant, weight_rows, item_block, weights, means, rep_ids,
    rep_means, rep_offsets, rep_indices, rep_values,
    tiles, tile_res, tile_levels, items, rows, cols, out,
):
    per_block = tiles * tiles
    for q in range(items.shape[0]):
        i = items[q]
        row = rows[q]
        col = cols[q]
        t = (row // tile_res) * tiles + (col // tile_res)
        lr = row % tile_res
        lc = col % tile_res
        label = labels[i, t]
        if label < 0:
            out[q] = constant[i, t]
            continue
        g = item_block[i] * per_block + t
        v = np.float64(means[g, label, lr * tile_res + lc])
        wr = weight_rows[i, t]
        for j in range(rep_ids.shape[2]):
            rid = rep_ids[g, label, j]
            if rid < 0:
                break
            rep = _eval_sparse(
                rep_means[rid], rep_indices, rep_values, rep_offsets[rid], rep_offsets[rid + 1],
                tile_res, tile_levels, lr, lc,
            )
            v += np.float64(weights[wr, j]) * rep
        out[q] = min(max(v, 0.0), 1.0)


@dataclass(frozen=True)
class CpcaVisibility:
    """
    CPCA-coded maps: every map is cut into CPCA_TILES^2 angular tiles and
    each (spatial block, tile position) group has its own codebook. Culled
    tiles keep only their constant; representatives are wavelet-truncated.
    """

    domain: str
    resolution: int
    labels: np.ndarray  # (M, T) int32, -1 culled
    constant: np.ndarray  # (M, T) float32
    weight_rows: np.ndarray  # (M, T) int32 into weights, -1 culled
    item_block: np.ndarray  # (M,) int32
    weights: np.ndarray  # (W, R) float32
    means: np.ndarray  # (G, Cmax, P) float32
    rep_ids: np.ndarray  # (G, Cmax, R) int32, -1 absent
    reps: WaveletMapSet
    tiles: int = CPCA_TILES

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def tile_resolution(self) -> int:
        return self.resolution // self.tiles

    def evaluate_texels(self, items, rows, cols) -> np.ndarray:
        items = np.ascontiguousarray(items, dtype=np.int64)
        out = np.empty(len(items))
        if len(items):
            _eval_cpca(
                self.labels, self.constant, self.weight_rows, self.item_block, self.weights, self.means, self.rep_ids,
                self.reps.means, self.reps.offsets, self.reps.indices, self.reps.values,
                self.tiles, self.tile_resolution, _levels(self.tile_resolution),
                items, np.ascontiguousarray(rows, dtype=np.int64), np.ascontiguousarray(cols, dtype=np.int64), out,
            )
        return out

    def evaluate(self, items, directions) -> np.ndarray:
        row, col = direction_texels(self.domain, self.resolution, directions)
        return self.evaluate_texels(items, row, col)

    def grid(self, i: int) -> np.ndarray:
        res = self.resolution
        rows, cols = np.divmod(np.arange(res * res), res)
        return self.evaluate_texels(np.full(res * res, i), rows, cols).reshape(res, res)

    @property
    def nbytes(self) -> int:
        return int(
            self.labels.nbytes + self.constant.nbytes + self.weight_rows.nbytes + self.item_block.nbytes
            + self.weights.nbytes + self.means.nbytes + self.rep_ids.nbytes + self.reps.nbytes
        )

    def to_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        arrays = {
            f"{prefix}.labels": self.labels,
            f"{prefix}.constant": self.constant,
            f"{prefix}.weight_rows": self.weight_rows,
            f"{prefix}.item_block": self.item_block,
            f"{prefix}.weights": self.weights,
            f"{prefix}.cluster_means": self.means,
            f"{prefix}.rep_ids": self.rep_ids,
        }
        arrays.update(self.reps.to_arrays(f"{prefix}.reps"))
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict, prefix: str, domain: str, resolution: int) -> "CpcaVisibility":
        reps = WaveletMapSet.from_arrays(arrays, f"{prefix}.reps", "tile", resolution // CPCA_TILES)
        return cls(
            domain, resolution,
            arrays[f"{prefix}.labels"], arrays[f"{prefix}.constant"], arrays[f"{prefix}.weight_rows"],
            arrays[f"{prefix}.item_block"], arrays[f"{prefix}.weights"], arrays[f"{prefix}.cluster_means"],
            arrays[f"{prefix}.rep_ids"], reps,
        )


VisibilityStore = Union[WaveletMapSet, CpcaVisibility]


@dataclass
class CompressionSettings:
    cpca: bool = True
    clusters: int = 30
    reps: int = 10
    max_keep_fraction: float = 0.10
    accuracy_floor: float = 0.95
    lanczos: bool = False
    seed: int = 0


def compress_inline(grids: np.ndarray, domain: Domain, settings: CompressionSettings) -> WaveletMapSet:
    res = grids.shape[-1]
    maps = [
        truncate(SphereWaveletMap.from_grid(g, domain), settings.max_keep_fraction, settings.accuracy_floor)
        for g in grids
    ]
    return WaveletMapSet.from_maps(maps, domain, res)


def _tile_view(grids: np.ndarray, tiles: int) -> np.ndarray:
    """(M, res, res) -> (M, T, P) with tile t = tile_row * tiles + tile_col."""
    m, res, _ = grids.shape
    ts = res // tiles
    return grids.reshape(m, tiles, ts, tiles, ts).transpose(0, 1, 3, 2, 4).reshape(m, tiles * tiles, ts * ts)


def compress_cpca(
    grids: np.ndarray,
    domain: Domain,
    settings: CompressionSettings,
    blocks: Optional[np.ndarray] = None,
) -> CpcaVisibility:
    grids = np.asarray(grids, dtype=np.float64)
    m, res, _ = grids.shape
    tiles = CPCA_TILES
    ts = res // tiles
    t_count = tiles * tiles
    blocks = np.zeros(m, dtype=np.int32) if blocks is None else np.asarray(blocks, dtype=np.int32)
    block_ids, item_block = np.unique(blocks, return_inverse=True)
    tiled = _tile_view(grids, tiles)

    labels = np.full((m, t_count), -1, dtype=np.int32)
    constant = np.zeros((m, t_count), dtype=np.float32)
    weight_rows = np.full((m, t_count), -1, dtype=np.int32)
    weight_list, group_means, group_reps, rep_maps = [], [], [], []

    for b in range(len(block_ids)):
        members = np.nonzero(item_block == b)[0]
        for t in range(t_count):
            book = cpca_fit(tiled[members, t], settings.clusters, settings.reps, settings.seed, settings.lanczos)
            labels[members, t] = book.labels
            constant[members, t] = np.where(book.labels < 0, book.constant, 0.0)
            fitted = members[book.labels >= 0]
            start = sum(len(w) for w in weight_list)
            weight_rows[fitted, t] = start + np.arange(len(fitted))
            weight_list.append(book.weights[book.labels >= 0])
            group_means.append(book.means)
            rep_ids = np.full((book.clusters, settings.reps), -1, dtype=np.int32)
            for c in range(book.clusters):
                for j in range(int(book.ranks[c])):
                    rep = SphereWaveletMap.from_grid(book.bases[c, j].reshape(ts, ts), "tile")
                    rep_ids[c, j] = len(rep_maps)
                    rep_maps.append(truncate(rep, settings.max_keep_fraction, settings.accuracy_floor))
            group_reps.append(rep_ids)

    c_max = max([len(g) for g in group_means] + [1])
    groups = len(group_means)
    means = np.zeros((groups, c_max, ts * ts), dtype=np.float32)
    rep_table = np.full((groups, c_max, settings.reps), -1, dtype=np.int32)
    for g in range(groups):
        means[g, : len(group_means[g])] = group_means[g]
        rep_table[g, : len(group_reps[g])] = group_reps[g]
    weights = np.concatenate(weight_list).astype(np.float32) if weight_list else np.zeros((0, settings.reps), np.float32)
    return CpcaVisibility(
        domain, res, labels, constant, weight_rows, item_block.astype(np.int32), weights, means, rep_table,
        WaveletMapSet.from_maps(rep_maps, "tile", ts),
    )


def compress_maps(
    grids: np.ndarray,
    domain: Domain,
    settings: CompressionSettings,
    blocks: Optional[np.ndarray] = None,
) -> VisibilityStore:
    grids = np.asarray(grids, dtype=np.float64)
    if not settings.cpca or len(grids) == 0:
        return compress_inline(grids, domain, settings)
    return compress_cpca(grids, domain, settings, blocks)
