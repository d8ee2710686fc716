import numpy as np

from src.aggregate.boundary import (
    FACES,
    boundary_faces,
    entry_face,
    face_frames,
    face_origins,
    inward_normals,
    trace_face_maps,
)
from src.aggregate.voxelize import GridSpec
from src.tracer import shapes
from src.tracer.bvh import Bvh

GRID = GridSpec(np.zeros(3), 5.0, 5)


def block_keys(lo, hi, hollow=False):
    r = np.arange(lo, hi)
    coords = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    if hollow:
        center = (lo + hi - 1) // 2
        coords = coords[~np.all(coords == center, axis=1)]
    return np.sort(GRID.keys(coords))


def test_single_voxel_has_six_faces():
    key = int(GRID.keys(np.array([2, 2, 2])))
    faces = boundary_faces(GRID, np.array([key]))
    np.testing.assert_array_equal(faces, key * FACES + np.arange(FACES))


def test_solid_block_hides_interior_faces():
    faces = boundary_faces(GRID, block_keys(1, 4))
    assert len(faces) == 6 * 9
    center = int(GRID.keys(np.array([2, 2, 2])))
    assert not np.any(faces // FACES == center)


def test_enclosed_cavity_is_not_exterior():
    solid = boundary_faces(GRID, block_keys(1, 4))
    hollow = boundary_faces(GRID, block_keys(1, 4, hollow=True))
    np.testing.assert_array_equal(hollow, solid)
    assert len(boundary_faces(GRID, np.zeros(0, dtype=np.int64))) == 0


def test_face_geometry():
    np.testing.assert_array_equal(inward_normals(np.arange(6)), [
        [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1],
    ])
    frames = face_frames(np.arange(6))
    np.testing.assert_allclose(frames[:, 2], inward_normals(np.arange(6)))
    np.testing.assert_array_equal(entry_face(np.array([[1.0, 0.0, 0.0], [0.0, -2.0, 0.0]]), np.array([0, 1])), [0, 3])

    key = int(GRID.keys(np.array([1, 2, 3])))
    u = np.random.default_rng(0).random((2, 10, 2))
    points = face_origins(GRID, np.array([key * FACES + 1, key * FACES + 4]), u)
    np.testing.assert_allclose(points[0, :, 0], 2.0)
    assert np.all((points[0, :, 1:] >= [2.0, 3.0]) & (points[0, :, 1:] <= [3.0, 4.0]))
    np.testing.assert_allclose(points[1, :, 2], 3.0)


def test_face_maps_against_a_blocker():
    grid = GridSpec(np.zeros(3), 4.0, 4)
    key = int(grid.keys(np.array([1, 1, 1])))
    face_keys = np.array([key * FACES + 4, key * FACES + 5])

    empty = Bvh.build(np.zeros((0, 3, 3)))
    open_maps = trace_face_maps(empty, grid, face_keys, 1, seed=0, eps=1e-6, resolution=8)
    np.testing.assert_array_equal(open_maps, np.ones((2, 8, 8)))

    floor = shapes.plane(200.0, 1)
    floor_tris = floor.vertices[floor.faces] + np.array([0.0, 0.0, 0.5])
    maps = trace_face_maps(Bvh.build(floor_tris), grid, face_keys, 2, seed=0, eps=1e-6, resolution=8)
    # the -z face looks up, away from the floor; the +z face looks down through the voxel
    np.testing.assert_array_equal(maps[0], np.ones((8, 8)))
    assert maps[1].mean() < 0.05
