"""
Level-of-detail rendering of a scene aggregate.

Per cone: the center ray is traversed through the sparse levels; every
occupied voxel whose primitive the ray hits adds

    L_o(w_o) * AIV(w_o) / |B|_{w_o}

where L_o is the unnormalized aggregate radiance (it already carries |A|),
estimated with m light samples and, under an environment light, m ABSDF
samples combined by the balance heuristic. Incident visibility is the
voxel's AIV instead of a shadow ray. Escaping light adds the background
times the ABV of the face where the ray entered the first occupied voxel.
Contributions are summed, so the voxel order does not matter.

Random numbers come from counter streams keyed by (seed, pixel, sample,
voxel, purpose); images do not depend on batching.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.aggregate.boundary import FACES, face_frames, inward_normals
from src.aggregate.store import AggregateLevel, SceneAggregate
from src.core.absdf import (
    AbsdfBatch,
    AbsdfOptions,
    eval_unnormalized_batch,
    pdf_batch,
    prepare_batch,
    sample_batch,
)
from src.core.primitive import intersect_batch, projected_area_batch, projected_area_stream
from src.core.spherical import frames_to_local, normalize
from src.core.tables import PrecompTables
from src.render.dda import ConePairs, LevelIndex, trace_pairs
from src.tracer.camera import PinholeCamera
from src.tracer.lights import LightSet, balance_heuristic
from src.utils.config import RenderSettings
from src.utils.image_io import ImageBuffer
from src.utils.parallel import run_tasks, worker_context
from src.utils.rng import CounterStream, hash_keys

# stream purposes
_PIXEL = 1
_LIGHT = 2
_BSDF = 3
_AREA = 4


@dataclass(frozen=True)
class Cone:
    origin: np.ndarray
    direction: np.ndarray
    aperture: float

    def __post_init__(self):
        if not 0.0 < self.aperture < np.pi / 4:
            raise ValueError(f"cone aperture must lie in (0, pi/4), got {self.aperture}")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "direction", normalize(np.asarray(self.direction, dtype=np.float64).reshape(3)))


@dataclass
class PreparedLevel:
    """A level with table lookups done and primitives unpacked for shading."""

    level: AggregateLevel
    batch: AbsdfBatch
    center: np.ndarray
    matrix: np.ndarray
    box_min: np.ndarray
    box_max: np.ndarray

    @classmethod
    def build(cls, level: AggregateLevel, tables: PrecompTables, primitive: str) -> "PreparedLevel":
        values = np.asarray(level.primitives, dtype=np.float64).reshape(-1, 15)
        box_min, box_max = values[:, 9:12], values[:, 12:15]
        if primitive == "cube":
            center = 0.5 * (box_min + box_max)
            radius = 0.5 * np.linalg.norm(box_max - box_min, axis=-1) * 1.001
            matrix = np.eye(3)[None] / (radius * radius)[:, None, None]
        else:
            center = values[:, 0:3]
            matrix = np.zeros((len(values), 3, 3))
            iu = np.triu_indices(3)
            matrix[:, iu[0], iu[1]] = values[:, 3:9]
            matrix = matrix + np.triu(matrix, 1).swapaxes(-1, -2)
        batch = prepare_batch(level.absdf, tables) if len(level) else level.absdf
        return cls(level, batch, center, matrix, box_min, box_max)


class LodRenderer:
    """Shades cones against one aggregate; read-only after construction."""

    def __init__(self, aggregate: SceneAggregate, lights: LightSet, tables: PrecompTables,
                 settings: Optional[RenderSettings] = None):
        self.aggregate = aggregate
        self.lights = lights
        self.tables = tables
        self.settings = settings or RenderSettings()
        self.options = AbsdfOptions(diffuse_mode=self.settings.diffuse_mode)
        fine_to_coarse = aggregate.levels[::-1]
        self.levels = [PreparedLevel.build(lvl, tables, self.settings.primitive) for lvl in fine_to_coarse]
        self.index = LevelIndex.from_keys(
            aggregate.origin, aggregate.size, aggregate.finest.resolution, [lvl.keys for lvl in fine_to_coarse],
        )
        self.overflow = 0

    # -- per pair ---------------------------------------------------------

    def _streams(self, pixel, sample, voxel_id, purpose: int, round_: int) -> CounterStream:
        return CounterStream(hash_keys(self.settings.seed, pixel, sample, voxel_id, purpose, round_))

    def _radiance(self, prepared: PreparedLevel, items, wo, pixel, sample, voxel_id) -> np.ndarray:
        """Unnormalized outgoing radiance toward wo, (N, 3)."""
        batch = prepared.batch.take(items)
        aiv = prepared.level.aiv
        n = len(items)
        centers = 0.5 * (prepared.box_min[items] + prepared.box_max[items])
        env = self.lights.environment
        total = np.zeros((n, 3))
        m = self.settings.nee
        for j in range(m):
            u = self._streams(pixel, sample, voxel_id, _LIGHT, j).random((n, 3))
            ls = self.lights.sample(centers, u)
            ok = ls.pdf > 0.0
            if np.any(ok):
                f = eval_unnormalized_batch(batch, ls.wi, wo, self.tables, self.options)
                vis = aiv.evaluate(items, ls.wi)
                p_bsdf = pdf_batch(batch, ls.wi, wo, self.tables) if env is not None else np.zeros(n)
                weight = np.where(ls.delta, 1.0, balance_heuristic(ls.pdf, p_bsdf))
                scale = np.where(ok, vis * weight / np.where(ok, ls.pdf, 1.0), 0.0)
                total += f * ls.radiance * scale[:, None]
            if env is not None:
                stream = self._streams(pixel, sample, voxel_id, _BSDF, j)
                wi, p, value = sample_batch(batch, wo, stream, self.tables, self.options)
                good = p > 0.0
                vis = aiv.evaluate(items, wi)
                weight = balance_heuristic(p, self.lights.environment_pdf(wi))
                scale = np.where(good, vis * weight / np.where(good, p, 1.0), 0.0)
                total += value * self.lights.background(wi) * scale[:, None]
        return total / m

    def _voxel_contributions(self, pairs: ConePairs, origins, dirs, pixel, sample) -> np.ndarray:
        out = np.zeros((len(origins), 3))
        for lvl_idx, prepared in enumerate(self.levels):
            sel = np.nonzero(pairs.level == lvl_idx)[0]
            if len(sel) == 0:
                continue
            cone = pairs.cone[sel]
            items = pairs.index[sel]
            o = origins[cone]
            d = dirs[cone]
            _, _, hit = intersect_batch(
                prepared.center[items], prepared.matrix[items], prepared.box_min[items], prepared.box_max[items], o, d,
            )
            wo = -d
            v_o = prepared.level.aiv.evaluate(items, wo)
            keep = hit & (v_o > 0.0)
            if not np.any(keep):
                continue
            cone, items, d, wo, v_o = cone[keep], items[keep], d[keep], wo[keep], v_o[keep]
            keys = prepared.level.keys[items]
            voxel_id = keys * 32 + lvl_idx
            # per-cone key: the 16-sample estimate error must not freeze into a voxel pattern
            area_key = hash_keys(self.settings.seed, _AREA, pixel[cone], sample[cone])
            area_rng = projected_area_stream(area_key, voxel_id, d)
            projected = projected_area_batch(
                prepared.center[items], prepared.matrix[items], prepared.box_min[items], prepared.box_max[items],
                d, area_rng, self.settings.projected_area_samples,
            )
            valid = projected > 0.0
            if not np.any(valid):
                continue
            cone, items, wo, v_o, projected, voxel_id = (
                cone[valid], items[valid], wo[valid], v_o[valid], projected[valid], voxel_id[valid],
            )
            radiance = self._radiance(prepared, items, wo, pixel[cone], sample[cone], voxel_id)
            contrib = radiance * (v_o / projected)[:, None]
            for c in range(3):
                out[:, c] += np.bincount(cone, weights=contrib[:, c], minlength=len(origins))
        return out

    def boundary_visibility(self, pairs: ConePairs, dirs: np.ndarray) -> np.ndarray:
        """ABV at the entry face of the first occupied voxel; 1 where no voxel is met."""
        vis = np.ones(len(dirs))
        for lvl_idx, prepared in enumerate(self.levels):
            sel = np.nonzero(pairs.first_level == lvl_idx)[0]
            if len(sel) == 0:
                continue
            level = prepared.level
            keys = level.keys[pairs.first_index[sel]]
            d = dirs[sel]
            candidates = level.face_index(keys[:, None] * FACES + np.arange(FACES)[None, :])
            facing = d @ inward_normals(np.arange(FACES)).T
            score = np.where((candidates >= 0) & (facing > 0.0), facing, -np.inf)
            entry = pairs.first_face[sel]
            rows = np.arange(len(sel))
            has_entry = entry >= 0
            entry_ok = has_entry & np.isfinite(score[rows, np.where(has_entry, entry, 0)])
            face = np.where(entry_ok, entry, np.argmax(score, axis=1))
            found = np.isfinite(score[rows, face])
            if not np.any(found):
                continue
            face_idx = candidates[rows, face][found]
            local = frames_to_local(face_frames(face[found]), d[found])
            vis[sel[found]] = level.abv.evaluate(face_idx, local)
        return vis

    def shade(self, origins: np.ndarray, dirs: np.ndarray, aperture: float, pixel: np.ndarray, sample: np.ndarray) -> np.ndarray:
        """Radiance of a batch of cones, (N, 3)."""
        pairs = trace_pairs(
            self.index, origins, dirs, aperture, self.settings.max_pairs_per_cone,
            -1 if self.settings.level is None else self.settings.level,
        )
        self.overflow += pairs.overflow
        radiance = self._voxel_contributions(pairs, origins, dirs, pixel, sample)
        if self.lights.environment is not None:
            radiance += self.lights.background(dirs) * self.boundary_visibility(pairs, dirs)[:, None]
        return radiance


def trace_cone(
    aggregate: SceneAggregate,
    lights: LightSet,
    cone: Cone,
    tables: PrecompTables,
    settings: Optional[RenderSettings] = None,
    pixel: int = 0,
    sample: int = 0,
    renderer: Optional[LodRenderer] = None,
) -> np.ndarray:
    """Radiance (3,) of one cone."""
    renderer = renderer or LodRenderer(aggregate, lights, tables, settings)
    return renderer.shade(
        cone.origin[None], cone.direction[None], cone.aperture,
        np.array([pixel], dtype=np.int64), np.array([sample], dtype=np.int64),
    )[0]


def _render_batch(start: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Cones [start, start + batch_cones) of the image; returns (pixel, radiance, overflow)."""
    ctx = worker_context()
    renderer = ctx.get("renderer")
    if renderer is None:
        renderer = ctx["renderer"] = LodRenderer(ctx["aggregate"], ctx["lights"], ctx["tables"], ctx["settings"])
    settings, camera = renderer.settings, ctx["camera"]
    total = camera.width * camera.height * settings.spp
    q = np.arange(start, min(start + settings.batch_cones, total), dtype=np.int64)
    pixel, sample = np.divmod(q, settings.spp)
    jitter = CounterStream(hash_keys(settings.seed, pixel, sample, _PIXEL)).random((len(q), 2))
    origins, dirs = camera.generate_rays(pixel % camera.width, pixel // camera.width, jitter)
    before = renderer.overflow
    radiance = renderer.shade(origins, dirs, camera.pixel_aperture(), pixel, sample)
    return pixel, radiance, renderer.overflow - before


def render(
    aggregate: SceneAggregate,
    lights: LightSet,
    camera: PinholeCamera,
    tables: PrecompTables,
    settings: Optional[RenderSettings] = None,
) -> ImageBuffer:
    """Box-filtered image; each pixel averages ``spp`` jittered cones."""
    settings = settings or RenderSettings()
    pixels = camera.width * camera.height
    total = pixels * settings.spp
    accum = np.zeros((pixels, 3))
    logging.info(
        f"LoD render {camera.width}x{camera.height} at {settings.spp} spp, {len(aggregate.levels)} level(s), "
        f"primitive={settings.primitive}"
    )
    context = {"aggregate": aggregate, "lights": lights, "tables": tables, "settings": settings, "camera": camera}
    starts = list(range(0, total, settings.batch_cones))
    overflow = 0
    for pixel, radiance, dropped in run_tasks(_render_batch, starts, settings.workers, "lod", context):
        overflow += dropped
        for c in range(3):
            accum[:, c] += np.bincount(pixel, weights=radiance[:, c], minlength=pixels)
    if overflow:
        logging.warning(f"{overflow} cone-voxel pair(s) exceeded max_pairs_per_cone and were ignored")
    image = (accum / settings.spp).reshape(camera.height, camera.width, 3)
    return ImageBuffer(image)
