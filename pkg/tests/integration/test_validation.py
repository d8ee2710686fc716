"""Oracle reports for stored ABSDF, AIV and ABV data of the plane aggregate."""

import numpy as np
import pytest

from src.utils.validation import (
    lat_long_directions,
    locate_voxel,
    side_by_side,
    validate_abv,
    validate_absdf,
    validate_aiv,
)


def central_voxel(aggregate):
    finest = aggregate.finest
    return tuple(int(c) for c in finest.grid.coords(finest.keys[4 * 8 + 4]))


def test_locate_voxel(small_plane_aggregate):
    scene, aggregate = small_plane_aggregate
    coords = central_voxel(aggregate)
    target = locate_voxel(scene, aggregate, coords)
    assert target.key == aggregate.finest.keys[4 * 8 + 4]
    assert target.occupancy.keys[target.occupancy_index] == target.key

    empty = (coords[0], coords[1], (coords[2] + 2) % 8)
    with pytest.raises(ValueError):
        locate_voxel(scene, aggregate, empty)
    with pytest.raises(ValueError):
        locate_voxel(scene, aggregate, (8, 0, 0))
    coarse = locate_voxel(scene, aggregate, (c // 2 for c in coords), resolution=4)
    assert coarse.level.resolution == 4


def test_absdf_report(small_plane_aggregate, fast_tables):
    scene, aggregate = small_plane_aggregate
    report = validate_absdf(scene, aggregate, fast_tables, central_voxel(aggregate),
                            slices=(2, 2), texels=(4, 8), samples=256, seed=1)
    assert report.kind == "absdf"
    assert report.stored.shape == report.reference.shape == (4, 32, 3)
    assert np.isfinite(report.psnr)
    assert report.psnr > 10.0
    assert report.to_dict()["voxel"] == list(central_voxel(aggregate))
    print(f"PASS: ABSDF PSNR {report.psnr:.1f} dB")


def test_aiv_report_of_open_plane(small_plane_aggregate):
    scene, aggregate = small_plane_aggregate
    report = validate_aiv(scene, aggregate, central_voxel(aggregate), rays_per_sample=2, seed=1)
    assert report.stored.shape == report.reference.shape == (32, 32)
    np.testing.assert_allclose(report.reference, 1.0)
    assert report.psnr == float("inf")


def test_abv_report(small_plane_aggregate):
    scene, aggregate = small_plane_aggregate
    report = validate_abv(scene, aggregate, central_voxel(aggregate), rays_per_texel=1, seed=1)
    assert report.details["faces"] == [4, 5]
    assert report.stored.shape == report.reference.shape == (2, 64, 64)
    assert report.psnr > 5.0
    assert report.mosaic.pixels.ndim == 3


def test_helpers():
    dirs = lat_long_directions(4, 8)
    assert dirs.shape == (4, 8, 3)
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=-1), 1.0)
    assert np.all(dirs[0, :, 2] > 0.0) and np.all(dirs[-1, :, 2] < 0.0)

    mosaic = side_by_side(np.zeros((4, 5)), np.full((4, 5), 2.0), scale=2)
    assert mosaic.pixels.shape == (8, 2 * (5 + 2 + 5), 3)
    assert mosaic.pixels[..., -1, 0].max() == pytest.approx(1.0)
