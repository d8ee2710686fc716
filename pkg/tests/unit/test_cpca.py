import logging

import numpy as np
import pytest

from src.core.cpca import FITTED, CpcaCodebook, cpca_error, cpca_fit, cpca_reconstruct, cpca_reconstruct_all


def grouped_tiles(seed=0, per_group=12, size=16):
    """Three well separated groups, each an affine rank-2 family."""
    rng = np.random.default_rng(seed)
    tiles = []
    for level in (0.2, 0.5, 0.8):
        basis = rng.normal(size=(2, size)) * 0.02
        weights = rng.uniform(-1.0, 1.0, (per_group, 2))
        tiles.append(level + weights @ basis)
    return np.concatenate(tiles)


def test_constant_tiles_are_culled():
    tiles = np.stack([np.ones(16), np.zeros(16), np.full(16, 1.0 - 1e-9)])
    book = cpca_fit(tiles, clusters=4, reps=2)
    assert np.all(book.labels == -1)
    np.testing.assert_array_equal(book.constant, [1.0, 0.0, 1.0])
    assert book.clusters == 0
    np.testing.assert_array_equal(cpca_reconstruct_all(book, 16), np.round(tiles))


def test_mixed_tiles_keep_culled_constants():
    tiles = np.stack([np.ones(16), np.linspace(0.1, 0.9, 16), np.zeros(16)])
    book = cpca_fit(tiles, clusters=2, reps=1)
    assert book.labels[0] == -1 and book.labels[2] == -1
    assert book.labels[1] >= 0
    assert book.constant[1] == FITTED
    np.testing.assert_allclose(cpca_reconstruct(book, 0), np.ones(16))
    np.testing.assert_allclose(cpca_reconstruct(book, 1), tiles[1], atol=1e-12)


def test_low_rank_clusters_reconstruct_exactly():
    tiles = grouped_tiles()
    book = cpca_fit(tiles, clusters=3, reps=2, seed=1)
    assert book.clusters == 3
    assert len(np.unique(book.labels)) == 3
    assert cpca_error(tiles, book) < 1e-10


def test_single_item_reconstruction_matches_batch():
    tiles = grouped_tiles(seed=4)
    book = cpca_fit(tiles, clusters=3, reps=1, seed=2)
    full = cpca_reconstruct_all(book, tiles.shape[1])
    for i in (0, 13, 30):
        np.testing.assert_allclose(cpca_reconstruct(book, i), full[i])


def test_fewer_representatives_loses_energy():
    tiles = grouped_tiles(seed=5)
    rank_two = cpca_error(tiles, cpca_fit(tiles, clusters=3, reps=2, seed=1))
    rank_one = cpca_error(tiles, cpca_fit(tiles, clusters=3, reps=1, seed=1))
    rank_zero_means = cpca_error(tiles, cpca_fit(tiles, clusters=1, reps=1, seed=1))
    assert rank_two <= rank_one + 1e-12
    assert rank_one > 0.0
    assert rank_zero_means > rank_one


def test_lanczos_matches_dense():
    tiles = grouped_tiles(seed=6, per_group=20, size=32)
    dense = cpca_fit(tiles, clusters=3, reps=2, seed=1)
    lanczos = cpca_fit(tiles, clusters=3, reps=2, seed=1, lanczos=True)
    assert cpca_error(tiles, lanczos) == pytest.approx(cpca_error(tiles, dense), abs=1e-8)


def test_small_cluster_reduces_rank(caplog):
    tiles = np.stack([np.linspace(0.1, 0.9, 16), np.linspace(0.2, 0.7, 16)])
    with caplog.at_level(logging.WARNING):
        book = cpca_fit(tiles, clusters=1, reps=4)
    assert book.ranks[0] == 2
    assert "representatives reduced" in caplog.text


def test_errors():
    with pytest.raises(ValueError):
        cpca_fit(np.zeros((0, 16)), clusters=2, reps=2)
    with pytest.raises(ValueError):
        CpcaCodebook(np.zeros(2, np.int32), np.zeros(3), np.zeros((0, 4)), np.zeros((0, 1, 4)), np.zeros(0, np.int32), np.zeros((2, 1)))


def test_error_is_monotone_over_one_to_ten_representatives():
    rng = np.random.default_rng(8)
    tiles = np.concatenate([grouped_tiles(seed=7, per_group=40, size=64), rng.uniform(0.2, 0.8, (60, 64))])
    errors = [cpca_error(tiles, cpca_fit(tiles, clusters=4, reps=r, seed=3)) for r in range(1, 11)]
    assert all(later <= earlier + 1e-9 for earlier, later in zip(errors, errors[1:]))
    assert errors[-1] < errors[0]
