"""
Scene file to image: a textured ground, a glossy sphere and a foliage
cluster aggregated and cone traced, against the reference renderer.
"""

import numpy as np
import pytest

from conftest import small_settings
from src.aggregate.builder import build_aggregate
from src.render.lod import render
from src.tracer.camera import PinholeCamera
from src.tracer.reference import render_reference
from src.tracer.scene import load_scene
from src.utils.config import ReferenceSettings, RenderSettings
from src.utils.metrics import rmse

GARDEN = {
    "scene_version": 1,
    "materials": [
        {"name": "ground", "basecolor": {"checker": [[0.55, 0.45, 0.3], [0.25, 0.35, 0.15]], "scale": 6.0},
         "roughness": {"checker": [0.9, 0.5], "scale": 6.0}},
        {"name": "glossy", "basecolor": [0.9, 0.85, 0.8], "roughness": 0.45, "metallic": 0.8},
        {"name": "leaves", "basecolor": [0.15, 0.45, 0.1], "roughness": 0.7, "specular": 0.4},
    ],
    "meshes": [
        {"generator": {"kind": "plane", "params": {"size": 4.0, "divisions": 40}}, "material": "ground"},
        {"generator": {"kind": "sphere", "params": {"radius": 0.6, "subdivisions": 3}}, "material": "glossy",
         "transform": {"translate": [-0.8, 0.3, 0.6]}},
        {"generator": {"kind": "quad_cluster", "params": {"count": 1500, "extent": 1.2, "quad_size": 0.08, "seed": 7}},
         "material": "leaves", "transform": {"translate": [0.9, -0.4, 0.9]}},
    ],
    "lights": [
        {"type": "environment", "radiance": [0.4, 0.45, 0.55]},
        {"type": "directional", "direction": [0.4, 0.2, 1.0], "irradiance": [2.5, 2.4, 2.2]},
    ],
}


def test_garden_matches_reference(write_doc, fast_tables):
    scene = load_scene(write_doc("garden.json", GARDEN))
    aggregate = build_aggregate(scene, small_settings(max_resolution=32, min_resolution=8, vis_rays=8, splat_points=8, ndf_k=2))
    camera = PinholeCamera.look_at((4.5, -4.5, 3.5), (0.0, 0.0, 0.4), fov_deg=35.0, width=32, height=32)

    reference = render_reference(scene, camera, ReferenceSettings(spp=256, seed=1, workers=1)).pixels
    lod = render(aggregate, scene.lights, camera, fast_tables, RenderSettings(spp=256, seed=2, workers=1)).pixels

    assert np.all(np.isfinite(lod))
    assert np.all(lod >= 0.0)
    error = rmse(lod, reference)
    assert error <= 0.1
    assert lod.mean() == pytest.approx(reference.mean(), rel=0.1)
    print(f"PASS: garden RMSE {error:.4f}")
