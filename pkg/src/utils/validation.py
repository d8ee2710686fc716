"""
Oracle comparisons for a built aggregate.

Each check recomputes one stored quantity from the scene (brute-force ABSDF
slices, raw ray-cast AIV and ABV maps), reports the PSNR of the stored
version against it and produces a side-by-side mosaic for inspection:
stored on the left, reference on the right.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from src.aggregate.boundary import FACES, trace_face_maps
from src.aggregate.statistics import compute_aiv, sample_voxel
from src.aggregate.store import AggregateLevel, SceneAggregate, absdf_at
from src.aggregate.voxelize import VoxelOccupancy, voxelize_level
from src.core.absdf import brute_force_absdf, eval_unnormalized
from src.core.tables import PrecompTables
from src.core.visibility import AIV_RESOLUTION
from src.tracer.bvh import Bvh, build_bvh
from src.tracer.reference import ray_epsilon
from src.tracer.scene import TriangleScene
from src.utils.config import AggregateSettings
from src.utils.image_io import ImageBuffer
from src.utils.metrics import psnr
from src.utils.rng import CounterStream, hash_keys

# keeps validation streams apart from the ones used while building
_VALIDATION_SALT = 0x5A17
_GAP = 2


@dataclass
class ValidationReport:
    kind: str
    psnr: float
    stored: np.ndarray
    reference: np.ndarray
    mosaic: ImageBuffer
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "psnr": self.psnr, **self.details}


@dataclass
class VoxelTarget:
    """An occupied voxel of one level together with the scene-side data needed to re-derive it."""

    level: AggregateLevel
    occupancy: VoxelOccupancy
    index: int
    occupancy_index: int
    coords: tuple

    @property
    def key(self) -> int:
        return int(self.level.keys[self.index])


def locate_voxel(scene: TriangleScene, aggregate: SceneAggregate, coords, resolution: Optional[int] = None) -> VoxelTarget:
    """Finds voxel ``coords`` (i, j, k) at ``resolution`` (finest by default)."""
    level = aggregate.finest if resolution is None else aggregate.level(resolution)
    coords = tuple(int(c) for c in coords)
    if len(coords) != 3 or min(coords) < 0 or max(coords) >= level.resolution:
        raise ValueError(f"voxel {coords} lies outside the {level.resolution}^3 grid")
    key = int(level.grid.keys(np.array(coords)))
    index = int(level.index_of(np.array([key]))[0])
    if index < 0:
        raise ValueError(f"voxel {coords} is empty at resolution {level.resolution}")
    occupancy = voxelize_level(scene, level.grid)
    occupancy_index = int(np.searchsorted(occupancy.keys, key))
    if occupancy_index >= len(occupancy) or occupancy.keys[occupancy_index] != key:
        raise ValueError(f"voxel {coords} is not occupied by this scene; was the aggregate built from it?")
    return VoxelTarget(level, occupancy, index, occupancy_index, coords)


def lat_long_directions(rows: int, cols: int) -> np.ndarray:
    """Texel-center directions of a z-up lat-long grid, (rows, cols, 3)."""
    theta = (np.arange(rows) + 0.5) * np.pi / rows
    phi = (np.arange(cols) + 0.5) * 2.0 * np.pi / cols
    t, p = np.meshgrid(theta, phi, indexing="ij")
    return np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1)


def side_by_side(stored: np.ndarray, reference: np.ndarray, scale: int = 1) -> ImageBuffer:
    """Mosaic of two (H, W[, 3]) arrays normalized by the reference peak."""
    def rgb(a):
        a = np.asarray(a, dtype=np.float64)
        return np.repeat(a[..., None], 3, axis=-1) if a.ndim == 2 else a

    left, right = rgb(stored), rgb(reference)
    peak = max(float(right.max()), 1e-12)
    gap = np.ones((left.shape[0], _GAP, 3))
    image = np.concatenate([left / peak, gap, right / peak], axis=1)
    if scale > 1:
        image = np.repeat(np.repeat(image, scale, axis=0), scale, axis=1)
    return ImageBuffer(image)


def _tile(grids: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """(rows*cols, h, w[, c]) -> (rows*(h+gap), cols*(w+gap)[, c]) with empty separators."""
    pad = [(0, 0), (0, _GAP), (0, _GAP)] + [(0, 0)] * (grids.ndim - 3)
    padded = np.pad(grids, pad)
    h, w = padded.shape[1:3]
    tiled = padded.reshape((rows, cols, h, w) + grids.shape[3:]).swapaxes(1, 2)
    return tiled.reshape((rows * h, cols * w) + grids.shape[3:])


def validate_absdf(
    scene: TriangleScene,
    aggregate: SceneAggregate,
    tables: PrecompTables,
    coords,
    resolution: Optional[int] = None,
    slices: tuple[int, int] = (8, 8),
    texels: tuple[int, int] = (8, 16),
    samples: int = 8192,
    seed: int = 0,
) -> ValidationReport:
    """
    Factored ABSDF against the brute-force area integral over a grid of
    lat-long slices: slice (i, j) fixes w_o, its texels sweep w_i. Values
    are unnormalized so voxels seen edge-on still compare.
    """
    target = locate_voxel(scene, aggregate, coords, resolution)
    clipped = target.occupancy.clip(scene)
    surface, _ = sample_voxel(
        scene, target.occupancy, clipped, target.occupancy_index, samples, seed ^ _VALIDATION_SALT,
    )
    absdf = absdf_at(target.level.absdf, target.index)
    wo_grid = lat_long_directions(*slices).reshape(-1, 3)
    wi_grid = lat_long_directions(*texels).reshape(-1, 3)

    stored = np.zeros((len(wo_grid), len(wi_grid), 3))
    reference = np.zeros_like(stored)
    for s, wo in enumerate(wo_grid):
        stored[s] = eval_unnormalized(absdf, wi_grid, np.broadcast_to(wo, wi_grid.shape), tables)
        for t, wi in enumerate(wi_grid):
            reference[s, t] = brute_force_absdf(surface, wi, wo).value

    peak = max(float(reference.max()), 1e-12)
    value = psnr(stored / peak, reference / peak)
    shape = (len(wo_grid),) + tuple(texels) + (3,)
    mosaic = side_by_side(_tile(stored.reshape(shape), *slices), _tile(reference.reshape(shape), *slices), scale=2)
    logging.info(f"ABSDF voxel {target.coords} at {target.level.resolution}^3: PSNR {value:.2f} dB over {len(wo_grid)} slices")
    return ValidationReport(
        "absdf", value, stored, reference, mosaic,
        {"voxel": list(target.coords), "resolution": target.level.resolution, "samples": samples,
         "slices": list(slices), "area": absdf.area},
    )


def validate_aiv(
    scene: TriangleScene,
    aggregate: SceneAggregate,
    coords,
    resolution: Optional[int] = None,
    rays_per_sample: int = 256,
    seed: int = 0,
    bvh: Optional[Bvh] = None,
) -> ValidationReport:
    """Stored (compressed) AIV map against a fresh, denser ray cast from new surface samples."""
    target = locate_voxel(scene, aggregate, coords, resolution)
    bvh = bvh or build_bvh(scene)
    eps = ray_epsilon(scene)
    settings = AggregateSettings.model_validate(aggregate.params)
    count = settings.samples_for(target.level.resolution)
    salted = seed ^ _VALIDATION_SALT
    clipped = target.occupancy.clip(scene)
    surface, tri = sample_voxel(scene, target.occupancy, clipped, target.occupancy_index, count, salted)
    stream = CounterStream(hash_keys(salted, target.level.resolution, target.key, np.arange(count)))
    reference = compute_aiv(bvh, surface.positions, scene.geometric_normals[tri], rays_per_sample, stream, 0, eps)
    stored = target.level.aiv.grid(target.index)
    value = psnr(np.clip(stored, 0.0, 1.0), reference)
    logging.info(f"AIV voxel {target.coords} at {target.level.resolution}^3: PSNR {value:.2f} dB")
    return ValidationReport(
        "aiv", value, stored, reference, side_by_side(stored, reference, scale=256 // AIV_RESOLUTION),
        {"voxel": list(target.coords), "resolution": target.level.resolution, "rays": count * rays_per_sample},
    )


def validate_abv(
    scene: TriangleScene,
    aggregate: SceneAggregate,
    coords,
    resolution: Optional[int] = None,
    rays_per_texel: int = 16,
    seed: int = 0,
    bvh: Optional[Bvh] = None,
) -> ValidationReport:
    """Stored ABV maps of the voxel's boundary faces against a fresh ray cast per face."""
    target = locate_voxel(scene, aggregate, coords, resolution)
    level = target.level
    face_keys = target.key * FACES + np.arange(FACES)
    face_idx = level.face_index(face_keys)
    present = face_idx >= 0
    if not np.any(present):
        raise ValueError(f"voxel {target.coords} has no boundary face")
    bvh = bvh or build_bvh(scene)
    reference = trace_face_maps(
        bvh, level.grid, face_keys[present], rays_per_texel, seed ^ _VALIDATION_SALT, ray_epsilon(scene),
    )
    stored = np.stack([level.abv.grid(int(i)) for i in face_idx[present]])
    value = psnr(np.clip(stored, 0.0, 1.0), reference)
    faces = int(present.sum())
    logging.info(f"ABV voxel {target.coords} at {level.resolution}^3: {faces} face(s), PSNR {value:.2f} dB")
    return ValidationReport(
        "abv", value, stored, reference, side_by_side(_tile(stored, faces, 1), _tile(reference, faces, 1), scale=2),
        {"voxel": list(target.coords), "resolution": level.resolution,
         "faces": [int(f) for f in np.nonzero(present)[0]]},
    )

