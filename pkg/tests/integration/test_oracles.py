"""
Scene-side oracles: occlusion-aware brute-force ABSDF and the direct
lighting reference renderer.
"""

import numpy as np
import pytest

from src.aggregate.statistics import scene_visibility
from src.core.absdf import SurfaceSamples, brute_force_absdf
from src.tracer import shapes
from src.tracer.bvh import build_bvh
from src.tracer.camera import PinholeCamera
from src.tracer.disney import DisneyParams
from src.tracer.lights import EnvironmentLight, LightSet
from src.tracer.reference import ray_epsilon, render_reference
from src.tracer.scene import Material, TriangleScene
from src.utils.config import ReferenceSettings


def covered_ground():
    """A ground plane with a larger roof half a unit above it."""
    ground = shapes.plane(2.0, 2)
    roof = shapes.plane(6.0, 1).transformed(np.array([
        [1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.5], [0.0, 0.0, 0.0, 1.0],
    ]))
    material = Material.constant("grey", basecolor=(0.5, 0.5, 0.5), roughness=1.0, metallic=0.0, specular=0.0)
    return TriangleScene.from_meshes([(ground, 0), (roof, 0)], [material])


def ground_samples(scene, n=256):
    rng = np.random.default_rng(0)
    positions = np.concatenate([rng.uniform(-0.5, 0.5, (n, 2)), np.zeros((n, 1))], axis=1)
    normals = np.tile([0.0, 0.0, 1.0], (n, 1))
    params = DisneyParams.constant(n, basecolor=(0.5, 0.5, 0.5), roughness=1.0, metallic=0.0, specular=0.0)
    visibility = scene_visibility(build_bvh(scene), ray_epsilon(scene))
    return SurfaceSamples(positions, normals, params, 1.0, visibility)


def test_occluded_directions_vanish():
    scene = covered_ground()
    samples = ground_samples(scene)
    wi = np.array([0.3, 0.0, 1.0])
    wo = np.array([0.0, 0.2, 1.0])
    open_value = brute_force_absdf(samples, wi, wo)
    covered = brute_force_absdf(samples, wi, wo, use_visibility=True)
    assert np.all(open_value.value > 0.0)
    np.testing.assert_array_equal(covered.value, np.zeros(3))
    assert covered.projected_area == 0.0


def test_unoccluded_side_is_unchanged():
    scene = covered_ground()
    samples = ground_samples(scene)
    wi = np.array([0.3, 0.0, -1.0])
    wo = np.array([0.0, 0.2, -1.0])
    np.testing.assert_allclose(
        brute_force_absdf(samples, wi, wo, use_visibility=True).value,
        brute_force_absdf(samples, wi, wo).value,
    )


def test_reference_render_of_lambertian_plane(plane_scene):
    camera = PinholeCamera.look_at((0.0, -0.01, 6.0), (0.0, 0.0, 0.0), fov_deg=12.0, width=8, height=8)
    image = render_reference(plane_scene, camera, ReferenceSettings(spp=1024, seed=2, tile_size=4, workers=1))
    assert image.pixels.shape == (8, 8, 3)
    # albedo 0.5 under unit radiance
    assert image.pixels.mean() == pytest.approx(0.5, rel=0.02)
    np.testing.assert_allclose(image.pixels, 0.5, rtol=0.05)
    print(f"PASS: reference plane radiance {image.pixels.mean():.4f}")


def test_reference_render_is_tile_independent(plane_scene):
    camera = PinholeCamera.look_at((0.0, -3.0, 3.0), (0.0, 0.0, 0.0), fov_deg=40.0, width=6, height=6)
    settings = ReferenceSettings(spp=4, seed=9, tile_size=6, workers=1)
    first = render_reference(plane_scene, camera, settings).pixels
    np.testing.assert_array_equal(first, render_reference(plane_scene, camera, settings).pixels)
    # rays above the horizon see the white background
    sky = render_reference(
        plane_scene.with_lights(LightSet([EnvironmentLight.constant((0.2, 0.4, 0.6))])),
        PinholeCamera.look_at((0.0, -3.0, 0.5), (0.0, 0.0, 3.0), fov_deg=10.0, width=2, height=2),
        settings,
    ).pixels
    np.testing.assert_allclose(sky, np.broadcast_to([0.2, 0.4, 0.6], sky.shape))
