import numpy as np
import pytest

from src.core.absdf import (
    DIFFUSE_KERNEL,
    SPECULAR_KERNEL,
    AbsdfBatch,
    AbsdfOptions,
    DirectionalMomentGrid,
    FactoredAbsdf,
    MomentSet,
    SurfaceSamples,
    UndefinedProjectionError,
    brute_force_absdf,
    directional_channels,
    estimate_absdf,
    eval_unnormalized,
    eval_unnormalized_batch,
    pdf,
    pdf_batch,
    prepare_batch,
    query_dir_moments,
    sample,
    shape_term,
    splat_directional_moments,
)
from src.core.sggx import NdfMixture, SggxLobe
from src.core.spherical import build_frames, fibonacci_sphere, normalize
from src.core.tables import BetaParams, iso_density
from src.tracer.disney import DisneyParams

UP = np.array([0.0, 0.0, 1.0])


def flat_samples(n=512, basecolor=(0.5, 0.5, 0.5), roughness=1.0, metallic=0.0, specular=0.0, area=1.0):
    rng = np.random.default_rng(11)
    positions = np.concatenate([rng.random((n, 2)), np.zeros((n, 1))], axis=1)
    params = DisneyParams.constant(n, basecolor=basecolor, roughness=roughness, metallic=metallic, specular=specular)
    return SurfaceSamples(positions, np.tile(UP, (n, 1)), params, area)


def rough_absdf(area=2.0):
    moments = MomentSet.from_params(
        DisneyParams.constant(1, basecolor=(0.6, 0.5, 0.4), roughness=0.3, metallic=0.2, specular=0.5)
    )
    return FactoredAbsdf(
        NdfMixture.single(SggxLobe.around(normalize(np.array([0.2, 0.1, 1.0])), 0.5)),
        BetaParams(3.0, 7.0),
        moments,
        DirectionalMomentGrid.constant(moments),
        area,
    )


def test_moment_set():
    params = DisneyParams(
        np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), np.array([0.2, 0.6]), np.array([1.0, 0.0]), np.array([0.5, 0.5])
    )
    m = MomentSet.from_params(params)
    np.testing.assert_allclose(m.basecolor, [0.5, 0.5, 0.0])
    np.testing.assert_allclose(m.metal_basecolor, [0.5, 0.0, 0.0])
    np.testing.assert_allclose(m.diffuse_albedo, [0.0, 0.5, 0.0])
    assert m.roughness == pytest.approx(0.4)
    assert m.roughness_variance == pytest.approx(0.04)
    np.testing.assert_allclose(MomentSet.from_array(m.to_array()).to_array(), m.to_array())
    with pytest.raises(ValueError):
        MomentSet.from_array(np.array([2.0] + [0.0] * 9))
    with pytest.raises(ValueError):
        MomentSet.from_array(np.array([0.0] * 8 + [0.5, 0.1]))


def test_absdf_requires_positive_area():
    with pytest.raises(ValueError):
        rough_absdf(area=0.0)


def test_directional_moments_of_constant_material():
    n = 64
    normals = normalize(np.random.default_rng(2).normal(size=(n, 3)))
    channels = np.tile(np.array([0.3, 0.2, 0.1, 0.0, 0.0, 0.0, 0.5, 0.0]), (n, 1))
    grid = splat_directional_moments(normals, np.full(n, 0.4), channels, points=8, seed=1)
    filled = ~grid.empty
    assert filled.any()
    np.testing.assert_allclose(grid.values[filled], np.broadcast_to(channels[0], grid.values[filled].shape), atol=1e-12)
    np.testing.assert_allclose(query_dir_moments(grid, UP), channels[0], atol=1e-12)
    constant = DirectionalMomentGrid.constant(MomentSet.from_array(np.linspace(0.1, 0.5, 10)))
    assert query_dir_moments(constant, np.tile(UP, (3, 1))).shape == (3, 8)


def test_flat_lambertian_voxel_matches_oracle(fast_tables):
    samples = flat_samples()
    f = estimate_absdf(samples, max_lobes=4, splat_points=8, seed=0)
    assert f.ndf.k == 1
    pairs = [
        (UP, UP),
        (normalize(np.array([0.5, 0.0, 0.866])), normalize(np.array([-0.34, 0.0, 0.94]))),
        (normalize(np.array([0.0, 0.6, 0.8])), normalize(np.array([0.3, -0.3, 0.9]))),
    ]
    for wi, wo in pairs:
        expected = brute_force_absdf(samples, wi, wo).value
        np.testing.assert_allclose(eval_unnormalized(f, wi, wo, fast_tables), expected, rtol=0.05)
    print("PASS: flat Lambertian voxel reproduces the area integral")


def test_values_are_non_negative_and_finite(fast_tables):
    f = rough_absdf()
    dirs = fibonacci_sphere(256)
    wi = np.repeat(dirs, 4, axis=0)
    wo = np.tile(dirs[::64], (256, 1))
    for mode in ("quadrature", "sg"):
        values = eval_unnormalized(f, wi, wo, fast_tables, AbsdfOptions(diffuse_mode=mode))
        assert values.shape == (len(wi), 3)
        assert np.all(np.isfinite(values)) and np.all(values >= 0.0)


def test_diffuse_modes_agree_roughly(fast_tables):
    f = rough_absdf()
    wi, wo = normalize(np.array([0.3, 0.0, 0.9])), normalize(np.array([-0.2, 0.2, 0.9]))
    quad = eval_unnormalized(f, wi, wo, fast_tables, AbsdfOptions(diffuse_mode="quadrature"))
    sg = eval_unnormalized(f, wi, wo, fast_tables, AbsdfOptions(diffuse_mode="sg"))
    assert np.all(sg > 0.5 * quad) and np.all(sg < 2.0 * quad)


def test_pdf_integrates_to_one(fast_tables):
    f = rough_absdf()
    dirs = fibonacci_sphere(100_000)
    wo = normalize(np.array([0.3, 0.0, 0.95]))
    total = pdf(f, dirs, wo, fast_tables).mean() * 4.0 * np.pi
    assert total == pytest.approx(1.0, abs=0.05)


def test_sampling_estimates_the_integral(fast_tables):
    f = rough_absdf()
    wo = normalize(np.array([0.3, 0.0, 0.95]))
    wi, p, value = sample(f, wo, np.random.default_rng(3), fast_tables, n=20_000)
    ok = p > 0.0
    assert ok.mean() > 0.99
    np.testing.assert_allclose(p[ok], pdf(f, wi[ok], wo, fast_tables), rtol=1e-10)
    mc = np.where(ok[:, None], value / np.where(ok, p, 1.0)[:, None], 0.0).mean(axis=0)
    dirs = fibonacci_sphere(50_000)
    quadrature = eval_unnormalized(f, dirs, wo, fast_tables).mean(axis=0) * 4.0 * np.pi
    np.testing.assert_allclose(mc, quadrature, rtol=0.1)


def test_batch_matches_single_evaluation(fast_tables):
    a, b = rough_absdf(1.0), rough_absdf(3.0)
    batch = prepare_batch(AbsdfBatch.from_absdfs([a, b]), fast_tables)
    assert batch.prepared and len(batch) == 2
    wi = np.array([[0.0, 0.0, 1.0], [0.6, 0.0, 0.8]])
    wo = np.array([[0.0, 0.6, 0.8], [0.0, 0.0, 1.0]])
    out = eval_unnormalized_batch(batch, wi, wo, fast_tables)
    np.testing.assert_allclose(out[0], eval_unnormalized(a, wi[0], wo[0], fast_tables), rtol=1e-10)
    np.testing.assert_allclose(out[1], eval_unnormalized(b, wi[1], wo[1], fast_tables), rtol=1e-10)
    np.testing.assert_allclose(pdf_batch(batch.take(np.array([1])), wi[1:], wo[1:], fast_tables), pdf(b, wi[1], wo[1], fast_tables))
    assert len(AbsdfBatch.empty()) == 0


def test_shape_term_bounds(fast_tables):
    wi = normalize(np.array([0.5, 0.0, 0.8]))
    wo = normalize(np.array([-0.4, 0.1, 0.9]))
    value = shape_term(wi, wo, 0.3, fast_tables)
    assert 0.0 <= value <= 1.0 + 1e-6
    # nearly smooth microsurfaces put the whole lobe in the lune
    assert shape_term(wi, wo, 0.01, fast_tables) > 0.9


def lune_fraction_mc(wi, wo, alpha, n=1_000_000, seed=3):
    """Share of D about the half vector inside the lune, uniform hemisphere sampling."""
    rng = np.random.default_rng(seed)
    h = normalize(wi + wo)
    z = rng.random(n)
    phi = 2.0 * np.pi * rng.random(n)
    r = np.sqrt(1.0 - z * z)
    local = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    dirs = local @ build_frames(h)
    weights = iso_density(z, alpha)
    inside = (dirs @ wi > 0.0) & (dirs @ wo > 0.0)
    return float(np.sum(weights * inside) / np.sum(weights))


@pytest.mark.parametrize("alpha", [0.4, 0.7])
@pytest.mark.parametrize("wi, wo", [
    ([0.5, 0.0, 0.8], [-0.4, 0.1, 0.9]),
    ([1.0, 0.0, 0.3], [-0.2, 0.6, 0.7]),
    ([0.9, 0.1, 0.2], [-0.8, -0.2, 0.3]),
])
def test_shape_term_matches_monte_carlo(fast_tables, alpha, wi, wo):
    wi = normalize(np.array(wi))
    wo = normalize(np.array(wo))
    expected = lune_fraction_mc(wi, wo, alpha)
    assert shape_term(wi, wo, alpha, fast_tables) == pytest.approx(expected, rel=0.03, abs=0.005)


def test_shape_term_symmetry(fast_tables):
    wi = normalize(np.array([0.3, -0.2, 0.9]))
    wo = normalize(np.array([-0.7, 0.4, 0.5]))
    assert shape_term(wi, wo, 0.5, fast_tables) == pytest.approx(shape_term(wo, wi, 0.5, fast_tables), abs=1e-6)
    assert shape_term(wi, wi, 0.5, fast_tables) == 1.0
    assert shape_term(wi, -wi, 0.5, fast_tables) == 0.0
    # wider lobes spill further out of the lune
    assert shape_term(wi, wo, 0.9, fast_tables) < shape_term(wi, wo, 0.2, fast_tables)


def test_oracle_edge_cases():
    samples = flat_samples(n=1)
    with pytest.raises(ValueError):
        brute_force_absdf(samples, UP, UP)
    grazing = brute_force_absdf(flat_samples(), UP, np.array([1.0, 0.0, 0.0]))
    assert grazing.projected_area == 0.0
    with pytest.raises(UndefinedProjectionError):
        grazing.normalized()
    estimate = brute_force_absdf(flat_samples(area=2.0), UP, UP)
    assert estimate.projected_area == pytest.approx(2.0)
    np.testing.assert_allclose(estimate.normalized(), 0.5 / np.pi, rtol=1e-9)
    with pytest.raises(ValueError):
        estimate_absdf(SurfaceSamples(np.zeros((0, 3)), np.zeros((0, 3)), DisneyParams.constant(0), 1.0))


@pytest.mark.parametrize("kernel", [SPECULAR_KERNEL, DIFFUSE_KERNEL])
def test_bicolor_voxel_keeps_colors_apart(kernel):
    rng = np.random.default_rng(5)
    n = 256
    up = np.arange(n) < n // 2
    axis = np.where(up[:, None], UP, -UP)
    normals = normalize(axis + 0.2 * rng.normal(size=(n, 3)))
    basecolor = np.where(up[:, None], [0.9, 0.05, 0.05], [0.05, 0.05, 0.9])
    params = DisneyParams(basecolor, np.full(n, 0.3), np.zeros(n), np.full(n, 0.5))
    grid = splat_directional_moments(normals, params.roughness, directional_channels(params), points=16, seed=2)
    top = query_dir_moments(grid, UP, kernel)
    bottom = query_dir_moments(grid, -UP, kernel)
    assert top[0] > 2.0 * top[2]
    assert bottom[2] > 2.0 * bottom[0]
