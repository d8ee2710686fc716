"""
Cone tracing: background handling, determinism, flat-plane radiance,
primitive coverage and occlusion between stacked voxels.
"""

import numpy as np
import pytest
import trimesh

from conftest import small_settings
from src.aggregate.builder import build_aggregate
from src.render.lod import Cone, LodRenderer, render, trace_cone
from src.tracer import shapes
from src.tracer.camera import PinholeCamera
from src.tracer.lights import DirectionalLight, EnvironmentLight, LightSet
from src.tracer.reference import render_reference
from src.tracer.scene import Material, TriangleScene
from src.utils.config import ReferenceSettings, RenderSettings
from src.utils.metrics import high_pass_energy, rmse

WHITE_SKY = LightSet([EnvironmentLight.constant()])


def top_camera(size=8):
    return PinholeCamera.look_at((0.0, -0.01, 6.0), (0.0, 0.0, 0.0), fov_deg=12.0, width=size, height=size)


def test_cone_validation():
    for aperture in (0.0, -0.1, np.pi / 4, 1.0):
        with pytest.raises(ValueError):
            Cone(np.zeros(3), np.array([0.0, 0.0, 1.0]), aperture)
    cone = Cone([0.0, 0.0, 0.0], [0.0, 0.0, 2.0], 0.01)
    np.testing.assert_allclose(cone.direction, [0.0, 0.0, 1.0])


def test_missed_cone_returns_background(small_plane_aggregate, fast_tables):
    _, aggregate = small_plane_aggregate
    cone = Cone(np.array([5.0, 5.0, 5.0]), np.array([1.0, 1.0, 1.0]), 0.01)
    radiance = trace_cone(aggregate, WHITE_SKY, cone, fast_tables)
    np.testing.assert_allclose(radiance, [1.0, 1.0, 1.0])

    sun = LightSet([DirectionalLight(np.array([0.0, 0.0, 1.0]), np.array([3.0, 3.0, 3.0]))])
    np.testing.assert_array_equal(trace_cone(aggregate, sun, cone, fast_tables), np.zeros(3))


def test_plane_under_white_sky(small_plane_aggregate, fast_tables):
    _, aggregate = small_plane_aggregate
    image = render(aggregate, WHITE_SKY, top_camera(), fast_tables, RenderSettings(spp=4, seed=1, workers=1))
    pixels = image.pixels
    assert pixels.shape == (8, 8, 3)
    assert np.all(np.isfinite(pixels))
    assert np.all(pixels >= 0.0)
    # albedo 0.5 under unit radiance reflects 0.5
    assert pixels.mean() == pytest.approx(0.5, abs=0.15)
    print(f"PASS: plane radiance {pixels.mean():.3f}")


def test_sun_lit_plane_is_brighter_than_sky_lit(small_plane_aggregate, fast_tables):
    _, aggregate = small_plane_aggregate
    settings = RenderSettings(spp=2, seed=1, workers=1)
    sky = render(aggregate, WHITE_SKY, top_camera(4), fast_tables, settings).pixels
    sun = LightSet([EnvironmentLight.constant(), DirectionalLight(np.array([0.0, 0.0, 1.0]), np.array([3.0, 3.0, 3.0]))])
    lit = render(aggregate, sun, top_camera(4), fast_tables, settings).pixels
    assert lit.mean() > sky.mean()


def test_render_is_deterministic(small_plane_aggregate, fast_tables):
    _, aggregate = small_plane_aggregate
    settings = RenderSettings(spp=2, seed=5, workers=1)
    first = render(aggregate, WHITE_SKY, top_camera(), fast_tables, settings).pixels
    second = render(aggregate, WHITE_SKY, top_camera(), fast_tables, settings).pixels
    np.testing.assert_array_equal(first, second)

    batched = render(aggregate, WHITE_SKY, top_camera(), fast_tables, RenderSettings(spp=2, seed=5, workers=1, batch_cones=16)).pixels
    np.testing.assert_allclose(batched, first, rtol=1e-10, atol=1e-12)

    reseeded = render(aggregate, WHITE_SKY, top_camera(), fast_tables, RenderSettings(spp=2, seed=6, workers=1)).pixels
    assert not np.array_equal(reseeded, first)


def test_forced_level_and_cube_primitive(small_plane_aggregate, fast_tables):
    _, aggregate = small_plane_aggregate
    for settings in (RenderSettings(spp=2, level=2, workers=1), RenderSettings(spp=2, primitive="cube", workers=1),
                     RenderSettings(spp=2, diffuse_mode="sg", workers=1)):
        pixels = render(aggregate, WHITE_SKY, top_camera(4), fast_tables, settings).pixels
        assert np.all(np.isfinite(pixels))
        assert 0.1 < pixels.mean() < 1.0


def test_grazing_rays_overflow_small_capacity(small_plane_aggregate, fast_tables):
    _, aggregate = small_plane_aggregate
    renderer = LodRenderer(aggregate, WHITE_SKY, fast_tables, RenderSettings(max_pairs_per_cone=8, workers=1))
    assert len(renderer.levels) == 3
    # runs inside the plane's voxel layer across the whole grid, diagonally in x and y
    origins = np.array([[-5.0, -5.0, 0.1]])
    dirs = np.array([[1.0, 1.0, 0.0]]) / np.sqrt(2.0)
    radiance = renderer.shade(origins, dirs, 1e-4, np.zeros(1, dtype=np.int64), np.zeros(1, dtype=np.int64))
    assert radiance.shape == (1, 3)
    assert np.all(np.isfinite(radiance))
    # the diagonal of an 8x8 layer visits 15 voxels
    assert renderer.overflow > 0


def test_ellipsoids_remove_the_cube_checkerboard(fast_tables):
    """
    A uniformly red plane tilted through a 32^3 grid, seen obliquely under a
    sun: boxes cover neighbouring voxels twice along slanted rays and print a
    voxel-sized checkerboard, truncated ellipsoids tile the plane.
    """
    red = Material.constant("red", basecolor=(0.8, 0.1, 0.1), roughness=1.0, metallic=0.0, specular=0.0)
    sun = LightSet([DirectionalLight(np.array([0.0, -0.5, np.sqrt(0.75)]), np.full(3, np.pi))])
    scene = TriangleScene.single(shapes.tilted_plane(3.0, 8, angle_deg=30.0), red, sun)
    aggregate = build_aggregate(scene, small_settings(max_resolution=32, min_resolution=32, budget=64 * 32 ** 2, ndf_k=1))
    camera = PinholeCamera.look_at((2.2, -2.0, 3.5), (0.0, 0.0, 0.0), fov_deg=20.0, width=32, height=32)

    reference = render_reference(scene, camera, ReferenceSettings(spp=16, seed=2, workers=1)).pixels
    errors = {}
    for primitive in ("cube", "ellipsoid"):
        settings = RenderSettings(spp=64, seed=3, primitive=primitive, workers=1)
        pixels = render(aggregate, sun, camera, fast_tables, settings).pixels
        errors[primitive] = (rmse(pixels, reference), high_pass_energy(pixels - reference))

    cube, ellipsoid = errors["cube"], errors["ellipsoid"]
    assert ellipsoid[0] < cube[0]
    assert ellipsoid[1] <= 0.5 * cube[1]
    print(f"PASS: RMSE {ellipsoid[0]:.4f} vs {cube[0]:.4f}, high-pass {ellipsoid[1]:.5f} vs {cube[1]:.5f}")


C1, C2, C3 = (0.9, 0.1, 0.0), (0.1, 0.9, 0.1), (0.0, 0.1, 0.9)


def quad(x0, x1, z):
    """Horizontal quad spanning [x0, x1] x [-1, 1] at height z."""
    move = trimesh.transformations.translation_matrix((0.5 * (x0 + x1), 0.0, z))
    return shapes.plane(x1 - x0, 1, 2.0).transformed(move)


def stacked_quads_image(fast_tables, middle_x):
    """
    Red quad over the left half, blue quad under the right half and a green
    quad between them on the side given by ``middle_x``, seen from straight
    above through a 4^3 grid whose x = 0 face splits the halves.
    """
    materials = [Material.constant(name, basecolor=c, roughness=1.0, metallic=0.0, specular=0.0)
                 for name, c in (("c1", C1), ("c2", C2), ("c3", C3))]
    sun = LightSet([DirectionalLight(np.array([0.0, 0.0, 1.0]), np.full(3, np.pi))])
    meshes = [(quad(-1.0, 0.0, 0.75), 0), (quad(*middle_x, 0.25), 1), (quad(0.0, 1.0, -0.75), 2)]
    scene = TriangleScene.from_meshes(meshes, materials, sun)
    aggregate = build_aggregate(scene, small_settings(max_resolution=4, min_resolution=4, vis_rays=16, ndf_k=1))
    camera = PinholeCamera.look_at((0.0, 0.0, 40.0), (0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0),
                                   fov_deg=np.degrees(2.0 * np.arctan(0.02)), width=16, height=16)
    return render(aggregate, sun, camera, fast_tables, RenderSettings(spp=32, seed=4, workers=1)).pixels


def test_hidden_middle_quad_does_not_leak(fast_tables):
    pixels = stacked_quads_image(fast_tables, (-1.0, 0.0))
    np.testing.assert_allclose(pixels.reshape(-1, 3).mean(axis=0), 0.5 * np.add(C1, C3), atol=0.02)
    assert pixels[..., 1].max() < 0.5


def test_moved_middle_quad_hides_the_bottom_one(fast_tables):
    pixels = stacked_quads_image(fast_tables, (0.0, 1.0))
    np.testing.assert_allclose(pixels.reshape(-1, 3).mean(axis=0), 0.5 * np.add(C1, C2), atol=0.02)
    assert pixels[..., 2].max() < 0.5
