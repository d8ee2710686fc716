"""
Worker processes change scheduling only: aggregates, LoD images and
reference images are identical for one and for several workers.
"""

import numpy as np

from conftest import small_settings
from src.aggregate.builder import build_aggregate
from src.render.lod import render
from src.tracer.camera import PinholeCamera
from src.tracer.reference import render_reference
from src.utils.config import ReferenceSettings, RenderSettings
from src.utils.parallel import run_tasks, worker_context


def top_camera(size=6):
    return PinholeCamera.look_at((0.0, -0.01, 6.0), (0.0, 0.0, 0.0), fov_deg=14.0, width=size, height=size)


def _scaled(task):
    return task * worker_context()["factor"]


def test_run_tasks_keeps_order_and_context():
    tasks = list(range(7))
    serial = run_tasks(_scaled, tasks, 1, "serial", {"factor": 3})
    pooled = run_tasks(_scaled, tasks, 2, "pooled", {"factor": 3}, chunksize=2)
    assert serial == pooled == [3 * t for t in tasks]
    # the serial path restores the caller's context
    assert "factor" not in worker_context()


def test_aggregate_independent_of_workers(plane_scene):
    one = build_aggregate(plane_scene, small_settings(max_resolution=4, workers=1))
    two = build_aggregate(plane_scene, small_settings(max_resolution=4, workers=2))
    assert len(one.levels) == len(two.levels)
    for a, b in zip(one.levels, two.levels):
        np.testing.assert_array_equal(a.keys, b.keys)
        np.testing.assert_array_equal(a.primitives, b.primitives)
        np.testing.assert_array_equal(a.absdf.alphas, b.absdf.alphas)
        np.testing.assert_array_equal(a.absdf.area, b.absdf.area)
        for i in range(len(a)):
            np.testing.assert_array_equal(a.aiv.grid(i), b.aiv.grid(i))


def test_lod_render_independent_of_workers(small_plane_aggregate, fast_tables):
    scene, aggregate = small_plane_aggregate
    settings = dict(spp=2, seed=4, batch_cones=16)
    one = render(aggregate, scene.lights, top_camera(), fast_tables, RenderSettings(workers=1, **settings))
    two = render(aggregate, scene.lights, top_camera(), fast_tables, RenderSettings(workers=3, **settings))
    np.testing.assert_array_equal(one.pixels, two.pixels)


def test_reference_render_independent_of_workers(plane_scene):
    settings = dict(spp=4, seed=2, tile_size=3)
    one = render_reference(plane_scene, top_camera(), ReferenceSettings(workers=1, **settings))
    two = render_reference(plane_scene, top_camera(), ReferenceSettings(workers=2, **settings))
    np.testing.assert_array_equal(one.pixels, two.pixels)
