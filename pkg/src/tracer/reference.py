"""
Direct-illumination reference renderer.

One bounce of next-event estimation: every camera hit combines a light
sample and a BRDF sample with the balance heuristic. Delta lights (point,
directional) are only reachable by light sampling. Pixels use a box filter.
The image is rendered tile by tile, each tile with its own generator
derived from (seed, tile index), so results do not depend on scheduling.
"""

import logging

import numpy as np

from src.core.spherical import normalize
from src.tracer.bvh import Bvh, build_bvh
from src.tracer.camera import PinholeCamera
from src.tracer.disney import DisneyParams, disney_eval, disney_pdf, disney_sample
from src.tracer.lights import LightSet, balance_heuristic
from src.tracer.scene import TriangleScene
from src.utils.config import ReferenceSettings
from src.utils.image_io import ImageBuffer
from src.utils.parallel import run_tasks, worker_context
from src.utils.rng import spawn_generator

RAYS_PER_PASS = 1 << 16


def ray_epsilon(scene: TriangleScene) -> float:
    lo, hi = scene.bounds
    return max(1e-5 * float(np.linalg.norm(hi - lo)), 1e-7)


def shade_direct(
    bvh: Bvh,
    lights: LightSet,
    positions: np.ndarray,
    normals: np.ndarray,
    params: DisneyParams,
    wo: np.ndarray,
    rng,
    eps: float,
) -> np.ndarray:
    """Outgoing direct radiance toward wo at surface points, (N, 3)."""
    n = len(positions)
    out = np.zeros((n, 3))
    if n == 0 or len(lights) == 0:
        return out
    oriented = np.where(np.sum(normals * wo, axis=-1, keepdims=True) < 0.0, -normals, normals)
    origins = positions + eps * oriented

    ls = lights.sample(positions, rng.random((n, 3)))
    cos_l = np.sum(oriented * ls.wi, axis=-1)
    f_l = disney_eval(params, oriented, ls.wi, wo)
    usable = (ls.pdf > 0.0) & (cos_l > 0.0) & np.any(f_l > 0.0, axis=-1)
    if np.any(usable):
        idx = np.nonzero(usable)[0]
        t_max = np.where(np.isfinite(ls.distance[idx]), ls.distance[idx] * (1.0 - 1e-6) - eps, np.inf)
        blocked = bvh.occluded(origins[idx], ls.wi[idx], 0.0, t_max)
        p_bsdf = disney_pdf(params.take(idx), oriented[idx], ls.wi[idx], wo[idx])
        weight = np.where(ls.delta[idx], 1.0, balance_heuristic(ls.pdf[idx], p_bsdf))
        contrib = f_l[idx] * ls.radiance[idx] * (cos_l[idx] * weight / ls.pdf[idx])[:, None]
        out[idx] += np.where(blocked[:, None], 0.0, contrib)

    if lights.environment is not None:
        wi, p_bsdf, f_b = disney_sample(params, oriented, wo, rng)
        cos_b = np.sum(oriented * wi, axis=-1)
        usable = (p_bsdf > 0.0) & (cos_b > 0.0)
        if np.any(usable):
            idx = np.nonzero(usable)[0]
            blocked = bvh.occluded(origins[idx], wi[idx])
            p_light = lights.environment_pdf(wi[idx])
            weight = balance_heuristic(p_bsdf[idx], p_light)
            contrib = f_b[idx] * lights.background(wi[idx]) * (cos_b[idx] * weight / p_bsdf[idx])[:, None]
            out[idx] += np.where(blocked[:, None], 0.0, contrib)
    return out


def _tiles(width: int, height: int, size: int) -> list[tuple[int, int, int, int]]:
    return [
        (x0, y0, min(x0 + size, width), min(y0 + size, height))
        for y0 in range(0, height, size)
        for x0 in range(0, width, size)
    ]


def _render_tile(scene, bvh, camera, tile, spp, rng, eps) -> np.ndarray:
    x0, y0, x1, y1 = tile
    xs, ys = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1), indexing="xy")
    px = xs.ravel()
    py = ys.ravel()
    pixels = len(px)
    accum = np.zeros((pixels, 3))
    per_pass = max(1, RAYS_PER_PASS // pixels)
    done = 0
    while done < spp:
        count = min(per_pass, spp - done)
        rx = np.repeat(px, count)
        ry = np.repeat(py, count)
        origins, directions = camera.generate_rays(rx, ry, rng.random((len(rx), 2)))
        radiance = trace_primary(scene, bvh, origins, directions, rng, eps)
        accum += radiance.reshape(pixels, count, 3).sum(axis=1)
        done += count
    return (accum / spp).reshape(y1 - y0, x1 - x0, 3)


def trace_primary(scene: TriangleScene, bvh: Bvh, origins, directions, rng, eps: float) -> np.ndarray:
    """Radiance along camera rays: background on a miss, direct lighting on a hit."""
    hits = bvh.intersect(origins, directions)
    out = scene.lights.background(directions)
    idx = np.nonzero(hits.hit)[0]
    if len(idx):
        tri = hits.triangle[idx]
        positions, normals, uvs = scene.interpolate(tri, hits.bary[idx])
        params = scene.material_params(tri, uvs)
        wo = -normalize(directions[idx])
        out[idx] = shade_direct(bvh, scene.lights, positions, normals, params, wo, rng, eps)
    return out


def _tile_task(index: int) -> np.ndarray:
    ctx = worker_context()
    settings = ctx["settings"]
    rng = spawn_generator(settings.seed, index)
    return _render_tile(ctx["scene"], ctx["bvh"], ctx["camera"], ctx["tiles"][index], settings.spp, rng, ctx["eps"])


def render_reference(
    scene: TriangleScene,
    camera: PinholeCamera,
    settings: ReferenceSettings | None = None,
    bvh: Bvh | None = None,
) -> ImageBuffer:
    settings = settings or ReferenceSettings()
    bvh = bvh or build_bvh(scene)
    image = np.zeros((camera.height, camera.width, 3))
    tiles = _tiles(camera.width, camera.height, settings.tile_size)
    logging.info(f"Reference render {camera.width}x{camera.height} at {settings.spp} spp ({len(tiles)} tiles)")
    context = {"scene": scene, "bvh": bvh, "camera": camera, "settings": settings, "tiles": tiles, "eps": ray_epsilon(scene)}
    for (x0, y0, x1, y1), block in zip(tiles, run_tasks(_tile_task, range(len(tiles)), settings.workers, "reference", context)):
        image[y0:y1, x0:x1] = block
    return ImageBuffer(image)
