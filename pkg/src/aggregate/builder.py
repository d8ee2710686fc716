"""
Aggregate precomputation: voxelize, collect per-voxel statistics, find the
boundary faces and compress both visibility kinds, one level at a time.
Levels are computed independently of each other.
"""

import hashlib
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from src.aggregate.boundary import FACES, compute_abv
from src.aggregate.statistics import collect_level_statistics
from src.aggregate.store import AggregateLevel, SceneAggregate
from src.aggregate.voxelize import VoxelOccupancy, voxelize
from src.core.visibility import ABV_RESOLUTION, AIV_RESOLUTION, CompressionSettings, compress_maps
from src.tracer.bvh import Bvh, build_bvh
from src.tracer.reference import ray_epsilon
from src.tracer.scene import TriangleScene
from src.utils.config import AggregateSettings

CPCA_BLOCK = 64


def spatial_blocks(level: VoxelOccupancy | AggregateLevel, keys: np.ndarray) -> np.ndarray:
    """CPCA block id of each voxel: its coordinates divided by the block edge."""
    coords = level.grid.coords(keys) // CPCA_BLOCK
    per_axis = max(level.grid.resolution // CPCA_BLOCK, 1)
    return ((coords[:, 0] * per_axis + coords[:, 1]) * per_axis + coords[:, 2]).astype(np.int32)


def compression_settings(settings: AggregateSettings, reps: int) -> CompressionSettings:
    return CompressionSettings(
        cpca=settings.cpca,
        clusters=settings.cpca_clusters,
        reps=reps,
        max_keep_fraction=settings.max_keep_fraction,
        accuracy_floor=settings.accuracy_floor,
        lanczos=settings.cpca_lanczos,
        seed=settings.seed,
    )


def tables_reference(path: Optional[str | Path]) -> dict:
    """Path and digest of the table file the aggregate is meant to be rendered with."""
    if path is None or not Path(path).is_file():
        return {}
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    return {"path": str(path), "sha256": digest}


def build_level(
    scene: TriangleScene,
    bvh: Bvh,
    occupancy: VoxelOccupancy,
    settings: AggregateSettings,
    eps: float,
) -> AggregateLevel:
    stats = collect_level_statistics(scene, bvh, occupancy, settings, eps)
    boundary = compute_abv(bvh, occupancy.grid, stats.keys, settings.abv_rays_per_texel, settings.seed, eps)

    aiv = compress_maps(
        stats.aiv.reshape(-1, AIV_RESOLUTION, AIV_RESOLUTION), "sphere",
        compression_settings(settings, settings.cpca_reps_aiv), spatial_blocks(occupancy, stats.keys),
    )
    abv = compress_maps(
        boundary.grids.reshape(-1, ABV_RESOLUTION, ABV_RESOLUTION), "hemisphere",
        compression_settings(settings, settings.cpca_reps_abv), spatial_blocks(occupancy, boundary.face_keys // FACES),
    )
    level = AggregateLevel(
        occupancy.grid, stats.keys, stats.absdf, stats.primitives, aiv,
        boundary.face_keys, abv, occupied=len(occupancy), dropped=stats.dropped,
    )
    logging.info(
        f"Level {level.resolution}^3: {len(level)} voxels ({100.0 * level.fraction:.2f}%), "
        f"{len(boundary)} boundary faces, visibility {(aiv.nbytes + abv.nbytes) / 1024:.1f} KiB"
    )
    return level


def build_aggregate(
    scene: TriangleScene,
    settings: Optional[AggregateSettings] = None,
    tables_path: Optional[str | Path] = None,
    bvh: Optional[Bvh] = None,
) -> SceneAggregate:
    settings = settings or AggregateSettings()
    bvh = bvh or build_bvh(scene)
    eps = ray_epsilon(scene)
    occupancy = voxelize(scene, settings.max_resolution, settings.min_resolution)
    logging.info(
        f"Building aggregate: {len(occupancy)} level(s) up to {settings.max_resolution}^3, "
        f"{len(scene.triangles)} triangles, area {scene.total_area:.4g}"
    )
    levels = [build_level(scene, bvh, occ, settings, eps) for occ in occupancy]
    grid = occupancy[-1].grid
    return SceneAggregate(
        grid.origin,
        grid.size,
        levels,
        params=settings.model_dump(exclude={"workers"}),
        scene_hash=scene.scene_hash,
        scene_path=str(scene.source) if scene.source else "",
        tables=tables_reference(tables_path),
    )
