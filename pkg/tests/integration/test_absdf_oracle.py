"""
Factored ABSDF against the brute-force area integral on synthetic voxels:
slice-grid PSNR, energy, reciprocity and the sampler's distribution.
"""

import numpy as np
import pytest
from scipy.stats import chisquare

from src.core.absdf import SurfaceSamples, brute_force_absdf, estimate_absdf, eval_unnormalized, pdf, sample
from src.core.spherical import fibonacci_sphere, normalize
from src.tracer.disney import DisneyParams, disney_eval
from src.utils.metrics import psnr
from src.utils.validation import lat_long_directions


def glossy_shell(n, seed):
    """Cylinder patch: normals fan out in x only."""
    rng = np.random.default_rng(seed)
    t = rng.uniform(-0.6, 0.6, n)
    positions = np.stack([np.sin(t), rng.random(n), np.cos(t)], axis=-1)
    normals = np.stack([np.sin(t), np.zeros(n), np.cos(t)], axis=-1)
    params = DisneyParams.constant(n, basecolor=(0.8, 0.6, 0.4), roughness=0.4, metallic=0.5, specular=0.5)
    return SurfaceSamples(positions, normals, params, 1.2)


def dual_normal_pair(n, seed):
    rng = np.random.default_rng(seed)
    positions = np.concatenate([rng.random((n, 2)), np.zeros((n, 1))], axis=1)
    side = rng.random(n) < 0.5
    normals = np.where(side[:, None], [0.6, 0.0, 0.8], [-0.6, 0.0, 0.8])
    params = DisneyParams.constant(n, basecolor=(0.6, 0.6, 0.6), roughness=1.0, metallic=0.0, specular=0.0)
    return SurfaceSamples(positions, normals, params, 1.0)


def rough_textured_plane(n, seed):
    rng = np.random.default_rng(seed)
    positions = np.concatenate([rng.random((n, 2)), np.zeros((n, 1))], axis=1)
    checker = (np.floor(4.0 * positions[:, 0]) + np.floor(4.0 * positions[:, 1])) % 2 == 0
    basecolor = np.where(checker[:, None], [0.7, 0.3, 0.2], [0.2, 0.4, 0.7])
    params = DisneyParams(basecolor, rng.uniform(0.5, 0.9, n), np.zeros(n), np.full(n, 0.5))
    return SurfaceSamples(positions, np.tile([0.0, 0.0, 1.0], (n, 1)), params, 1.0)


def slice_grid_psnr(samples, f, tables, slices=(8, 8), texels=(8, 8)):
    """PSNR over lat-long slices (fixed w_o, w_i sweeping the texels), peak-normalized."""
    wo_grid = lat_long_directions(*slices).reshape(-1, 3)
    wi_grid = lat_long_directions(*texels).reshape(-1, 3)
    stored = np.stack([eval_unnormalized(f, wi_grid, np.broadcast_to(wo, wi_grid.shape), tables) for wo in wo_grid])
    reference = np.stack([[brute_force_absdf(samples, wi, wo).value for wi in wi_grid] for wo in wo_grid])
    peak = max(float(reference.max()), 1e-12)
    return psnr(stored / peak, reference / peak)


@pytest.mark.parametrize("make", [glossy_shell, dual_normal_pair, rough_textured_plane])
def test_slice_grid_psnr(fast_tables, make):
    f = estimate_absdf(make(4096, seed=1), seed=0)
    value = slice_grid_psnr(make(16384, seed=2), f, fast_tables)
    assert value >= 30.0
    print(f"PASS: {make.__name__} PSNR {value:.2f} dB")


def random_voxel(rng, n=4096, roughness=(0.3, 0.7)):
    """One or two normal clusters around a random axis with a random base material."""
    axis = normalize(rng.normal(size=3))
    spread = rng.uniform(0.05, 0.5)
    centers = np.tile(axis, (n, 1))
    if rng.random() < 0.5:
        centers[n // 2:] = normalize(axis + rng.normal(size=3))
    normals = normalize(centers + spread * rng.normal(size=(n, 3)))
    basecolor = np.clip(rng.uniform(0.05, 0.55, 3) + 0.05 * rng.normal(size=(n, 3)), 0.0, 0.6)
    low = rng.uniform(*roughness)
    params = DisneyParams(
        basecolor,
        rng.uniform(low, low + 0.2, n),
        np.full(n, rng.uniform(0.0, 1.0)),
        np.full(n, rng.uniform(0.0, 0.2)),
    )
    samples = SurfaceSamples(rng.random((n, 3)), normals, params, rng.uniform(0.5, 2.0))
    while True:
        wo = normalize(axis + 0.6 * rng.normal(size=3))
        if wo @ axis > 0.3:
            return samples, wo


def test_oracle_energy_and_reciprocity():
    rng = np.random.default_rng(42)
    for _ in range(50):
        samples, wo = random_voxel(rng)
        n = len(samples)
        wi = normalize(rng.normal(size=(n, 3)))
        wo_b = np.broadcast_to(wo, (n, 3))
        cos_o = np.abs(samples.normals @ wo)
        g = disney_eval(samples.params, samples.normals, wi, wo_b) * (np.abs(np.sum(samples.normals * wi, axis=1)) * cos_o)[:, None]
        scale = 4.0 * np.pi / cos_o.mean()
        energy = scale * g.mean(axis=0)
        sigma = scale * g.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(energy <= 1.0 + 3.0 * sigma)

        other = normalize(rng.normal(size=3))
        forward = brute_force_absdf(samples, other, wo)
        backward = brute_force_absdf(samples, wo, other)
        bound = 3.0 * np.hypot(forward.stderr, backward.stderr) + 1e-12
        assert np.all(np.abs(forward.value - backward.value) <= bound)


def test_factored_energy_and_reciprocity(fast_tables):
    rng = np.random.default_rng(7)
    dirs = fibonacci_sphere(8192)
    for _ in range(10):
        samples, wo = random_voxel(rng)
        f = estimate_absdf(samples, seed=1)
        projected = f.area * np.mean(np.abs(samples.normals @ wo))
        energy = eval_unnormalized(f, dirs, wo, fast_tables).mean(axis=0) * 4.0 * np.pi / projected
        assert np.all(energy <= 1.0)

        wi = normalize(rng.normal(size=(16, 3)))
        wo_b = np.broadcast_to(wo, wi.shape)
        np.testing.assert_allclose(
            eval_unnormalized(f, wi, wo_b, fast_tables), eval_unnormalized(f, wo_b, wi, fast_tables), rtol=1e-4, atol=1e-9,
        )


def equal_area_bins(directions, bands=8, sectors=8):
    """z bands times azimuth sectors; every bin covers 4 pi / 64 sr."""
    z = np.clip(directions[:, 2], -1.0, 1.0 - 1e-12)
    band = np.minimum(((z + 1.0) * 0.5 * bands).astype(np.int64), bands - 1)
    phi = np.mod(np.arctan2(directions[:, 1], directions[:, 0]), 2.0 * np.pi)
    sector = np.minimum((phi / (2.0 * np.pi) * sectors).astype(np.int64), sectors - 1)
    return band * sectors + sector


def bin_probabilities(f, wo, tables, bands=8, sectors=8, sub=48):
    """Integral of the pdf over every bin, midpoint rule on a sub x sub grid in (z, phi)."""
    s = (np.arange(sub) + 0.5) / sub
    probs = np.empty(bands * sectors)
    for b in range(bands):
        z = -1.0 + 2.0 * (b + s) / bands
        for c in range(sectors):
            phi = 2.0 * np.pi * (c + s) / sectors
            zz, pp = np.meshgrid(z, phi, indexing="ij")
            r = np.sqrt(np.maximum(1.0 - zz * zz, 0.0))
            dirs = np.stack([r * np.cos(pp), r * np.sin(pp), zz], axis=-1).reshape(-1, 3)
            probs[b * sectors + c] = pdf(f, dirs, wo, tables).mean() * 4.0 * np.pi / (bands * sectors)
    return probs


def test_sampled_directions_follow_the_pdf(fast_tables):
    rng = np.random.default_rng(11)
    for voxel in range(10):
        samples, wo = random_voxel(rng, n=2048, roughness=(0.5, 0.7))
        f = estimate_absdf(samples, seed=voxel)
        wi, p, _ = sample(f, wo, np.random.default_rng(100 + voxel), fast_tables, n=20_000)
        ok = p > 0.0
        assert ok.mean() > 0.999
        observed = np.bincount(equal_area_bins(wi[ok]), minlength=64).astype(np.float64)
        probs = bin_probabilities(f, wo, fast_tables)
        assert probs.sum() == pytest.approx(1.0, abs=0.01)
        expected = probs / probs.sum() * observed.sum()
        # sparse bins are pooled so every cell expects at least five samples
        small = expected < 5.0
        if np.any(small):
            observed = np.append(observed[~small], observed[small].sum())
            expected = np.append(expected[~small], expected[small].sum())
        _, p_value = chisquare(observed, expected)
        # 10 voxels at a 1% family-wise level
        assert p_value > 1e-3
