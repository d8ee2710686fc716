"""
Per-voxel statistics: surface samples, the factored ABSDF, the truncated
ellipsoid primitive and the aggregated interior visibility (AIV) map.

Every random number of a voxel is drawn from a counter stream keyed by
(seed, resolution, voxel key), so a voxel's record does not depend on which
other voxels are processed or in which order.
"""

import logging
from dataclasses import dataclass

import numpy as np

from src.aggregate.voxelize import MAX_POLY, ClippedPairs, VoxelOccupancy
from src.core.absdf import AbsdfBatch, FactoredAbsdf, SurfaceSamples, estimate_absdf
from src.core.primitive import TruncEllipsoid, fit_primitive
from src.core.spherical import equal_area_square_to_sphere
from src.core.visibility import AIV_RESOLUTION
from src.tracer.bvh import Bvh
from src.tracer.scene import TriangleScene, uniform_barycentrics
from src.utils.config import AggregateSettings
from src.utils.parallel import run_tasks, worker_context
from src.utils.rng import CounterStream, hash_keys

# stream tags
_SURFACE = 1
_VISIBILITY = 2


def voxel_seed(seed: int, resolution: int, key: int) -> int:
    return int(hash_keys(seed, resolution, key) % np.uint64(2 ** 31))


def _stream(seed: int, resolution: int, key: int, tag: int, count: int) -> CounterStream:
    return CounterStream(hash_keys(seed, resolution, key, tag, np.arange(count, dtype=np.uint64)))


def _fan_areas(positions: np.ndarray, count: np.ndarray) -> np.ndarray:
    """Areas of the fan triangles (0, i+1, i+2) of each clipped polygon, (P, MAX_POLY - 2)."""
    a = positions[:, 1:-1] - positions[:, :1]
    b = positions[:, 2:] - positions[:, :1]
    area = 0.5 * np.linalg.norm(np.cross(a, b), axis=-1)
    valid = np.arange(MAX_POLY - 2)[None, :] + 2 < count[:, None]
    return np.where(valid, area, 0.0)


def sample_voxel(
    scene: TriangleScene,
    level: VoxelOccupancy,
    clipped: ClippedPairs,
    index: int,
    count: int,
    seed: int,
) -> tuple[SurfaceSamples, np.ndarray]:
    """Area-uniform samples of the clipped surfaces inside voxel ``index`` of ``level``, with their triangle ids."""
    start, end = level.offsets[index], level.offsets[index + 1]
    key = int(level.keys[index])
    area = clipped.area[start:end]
    total = float(area.sum())
    if total <= 0.0:
        raise ValueError(f"voxel {key} has no surface area")
    u = _stream(seed, level.resolution, key, _SURFACE, count).random((count, 4))

    cdf = np.cumsum(area)
    pair = np.minimum(np.searchsorted(cdf, u[:, 0] * cdf[-1], side="right"), len(cdf) - 1) + start
    fans = _fan_areas(clipped.positions[pair], clipped.count[pair])
    fan_cdf = np.cumsum(fans, axis=1)
    fan = np.minimum(np.sum(fan_cdf < (u[:, 1] * fan_cdf[:, -1])[:, None], axis=1), MAX_POLY - 3)
    w = uniform_barycentrics(u[:, 2:4])
    rows = np.arange(count)
    poly_bary = clipped.bary[pair]
    bary = (
        (1.0 - w[:, 0:1] - w[:, 1:2]) * poly_bary[:, 0]
        + w[:, 0:1] * poly_bary[rows, fan + 1]
        + w[:, 1:2] * poly_bary[rows, fan + 2]
    )

    tri = level.pair_tri[pair]
    positions, normals, uvs = scene.interpolate(tri, bary)
    return SurfaceSamples(positions, normals, scene.material_params(tri, uvs), total), tri


def aiv_directions(resolution: int, rays: int, u: np.ndarray, offset: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Stratified directions over the equal-area sphere map: ray r goes to texel
    (r + offset) mod res^2, jittered by ``u`` (rays, 2). Returns (dirs, texel).
    """
    texels = resolution * resolution
    texel = (np.arange(rays) + offset) % texels
    row, col = np.divmod(texel, resolution)
    square = np.stack([(col + u[:, 0]) / resolution, (row + u[:, 1]) / resolution], axis=-1)
    return equal_area_square_to_sphere(square), texel


def compute_aiv(
    bvh: Bvh,
    positions: np.ndarray,
    geometric_normals: np.ndarray,
    rays_per_sample: int,
    stream: CounterStream,
    offset: int,
    eps: float,
    resolution: int = AIV_RESOLUTION,
) -> np.ndarray:
    """Mean visibility per texel of rays leaving the samples; unvisited texels take the overall mean."""
    n = len(positions)
    total = n * rays_per_sample
    jitter = stream.random((n, rays_per_sample * 2)).reshape(total, 2)
    dirs, texel = aiv_directions(resolution, total, jitter, offset)
    origin_idx = np.repeat(np.arange(n), rays_per_sample)
    g = geometric_normals[origin_idx]
    side = np.where(np.sum(g * dirs, axis=-1) < 0.0, -1.0, 1.0)
    origins = positions[origin_idx] + (eps * side)[:, None] * g
    visible = ~bvh.occluded(origins, dirs)

    texels = resolution * resolution
    hits = np.bincount(texel, weights=visible.astype(np.float64), minlength=texels)
    counts = np.bincount(texel, minlength=texels)
    mean = float(visible.mean()) if total else 1.0
    grid = np.where(counts > 0, hits / np.maximum(counts, 1), mean)
    return grid.reshape(resolution, resolution)


@dataclass(frozen=True)
class VoxelStatistics:
    key: int
    area: float
    absdf: FactoredAbsdf
    primitive: TruncEllipsoid
    aiv: np.ndarray


def collect_voxel_stats(
    scene: TriangleScene,
    bvh: Bvh,
    level: VoxelOccupancy,
    clipped: ClippedPairs,
    index: int,
    settings: AggregateSettings,
    eps: float,
) -> VoxelStatistics:
    """Complete record of one occupied voxel; the area is the exact clipped area."""
    res = level.resolution
    key = int(level.keys[index])
    count = settings.samples_for(res)
    samples, tri = sample_voxel(scene, level, clipped, index, count, settings.seed)
    absdf = estimate_absdf(samples, settings.ndf_k, settings.splat_points, voxel_seed(settings.seed, res, key))

    start, end = level.offsets[index], level.offsets[index + 1]
    corners = [clipped.positions[p, : clipped.count[p]] for p in range(start, end)]
    box_min, box_max = level.grid.boxes(np.array([key]))
    primitive = fit_primitive(np.concatenate([samples.positions] + corners), box_min[0], box_max[0])

    stream = _stream(settings.seed, res, key, _VISIBILITY, count)
    offset = int(hash_keys(settings.seed, res, key, _VISIBILITY) % np.uint64(AIV_RESOLUTION ** 2))
    aiv = compute_aiv(bvh, samples.positions, scene.geometric_normals[tri], settings.vis_rays, stream, offset, eps)
    return VoxelStatistics(key, samples.area, absdf, primitive, aiv)


def _voxel_task(index: int) -> VoxelStatistics:
    ctx = worker_context()
    return collect_voxel_stats(ctx["scene"], ctx["bvh"], ctx["level"], ctx["clipped"], index, ctx["settings"], ctx["eps"])


@dataclass
class LevelStatistics:
    """Records of one level in key order, with degenerate voxels removed."""

    resolution: int
    keys: np.ndarray
    absdf: AbsdfBatch
    primitives: np.ndarray  # (V, 15)
    aiv: np.ndarray  # (V, 32, 32)
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.keys)


def collect_level_statistics(
    scene: TriangleScene,
    bvh: Bvh,
    level: VoxelOccupancy,
    settings: AggregateSettings,
    eps: float,
) -> LevelStatistics:
    clipped = level.clip(scene)
    areas = level.voxel_areas(clipped)
    keep = np.nonzero(areas > 0.0)[0]
    dropped = len(level) - len(keep)
    if dropped:
        logging.warning(f"Level {level.resolution}^3: dropped {dropped} voxel(s) holding only degenerate geometry")

    context = {"scene": scene, "bvh": bvh, "level": level, "clipped": clipped, "settings": settings, "eps": eps}
    chunk = max(1, len(keep) // (8 * settings.workers))
    records = run_tasks(_voxel_task, [int(i) for i in keep], settings.workers, f"voxels {level.resolution}^3", context, chunk)

    if not records:
        return LevelStatistics(level.resolution, np.zeros(0, dtype=np.int64), AbsdfBatch.empty(),
                               np.zeros((0, 15)), np.zeros((0, AIV_RESOLUTION, AIV_RESOLUTION)), dropped)
    return LevelStatistics(
        level.resolution,
        np.array([r.key for r in records], dtype=np.int64),
        AbsdfBatch.from_absdfs([r.absdf for r in records]),
        np.stack([r.primitive.to_array() for r in records]),
        np.stack([r.aiv for r in records]),
        dropped,
    )


def scene_visibility(bvh: Bvh, eps: float):
    """V(x, w) for surface samples, offsetting origins to the side of w."""

    def visibility(positions: np.ndarray, normals: np.ndarray, w: np.ndarray) -> np.ndarray:
        dirs = np.broadcast_to(np.asarray(w, dtype=np.float64), positions.shape)
        side = np.where(np.sum(normals * dirs, axis=-1) < 0.0, -1.0, 1.0)
        return ~bvh.occluded(positions + (eps * side)[:, None] * normals, dirs)

    return visibility
