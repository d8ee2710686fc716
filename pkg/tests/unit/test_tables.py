import io
import logging
from dataclasses import replace

import numpy as np
import pytest

from src.core.sggx import sggx_pdf_batched
from src.core.tables import (
    BETA_RANGE,
    LTC_FLAG_RESIDUAL,
    MAGIC,
    TABLE_TAGS,
    BetaParams,
    TableFormatError,
    TableGrid,
    _fit_beta_node,
    _fit_conv_node,
    _fit_ltc_node,
    _mu_quadrature,
    beta_from_moments,
    beta_mixture_density,
    check_tables,
    deserialize_tables,
    fit_directions,
    ggx_convolution_reference,
    ggx_target_density,
    iso_pdf,
    load_tables,
    ltc_density,
    ltc_inverse_from_params,
    relative_error,
    save_tables,
    serialize_tables,
    sg_convolution_reference,
)
from src.utils.binio import pack_json, read_chunk, write_chunk


def test_table_grid_shape_and_clamping():
    with pytest.raises(ValueError):
        TableGrid("bad", (np.linspace(0, 1, 3),), np.zeros((4, 1)))
    grid = TableGrid("line", (np.array([0.0, 1.0]),), np.array([[0.0], [2.0]]))
    np.testing.assert_allclose(grid.query(np.array([[0.25], [-5.0], [9.0]]))[:, 0], [0.5, 0.0, 2.0])
    with pytest.raises(ValueError):
        grid.query(np.array([[0.1, 0.2]]))


def test_log_axes_interpolate_in_log_space():
    axis = np.array([1.0, 100.0])
    grid = TableGrid("log", (axis,), np.array([[0.0], [1.0]]), log_axes=(True,))
    assert grid.query(np.array([[10.0]]))[0, 0] == pytest.approx(0.5, abs=1e-6)


def test_beta_from_moments_recovers_parameters():
    truth = BetaParams(2.0, 5.0)
    fit = beta_from_moments(truth.mean, truth.variance)
    assert fit.a == pytest.approx(2.0)
    assert fit.b == pytest.approx(5.0)
    assert truth.ppf(np.array([0.5]))[0] == pytest.approx(0.26445, abs=1e-4)


def test_beta_from_moments_edge_cases():
    with pytest.raises(ValueError):
        beta_from_moments(1.0, 0.01)
    with pytest.raises(ValueError):
        BetaParams(0.0, 1.0)
    sharp = beta_from_moments(0.3, 0.0)
    assert sharp.concentration == pytest.approx(1e4)
    assert sharp.mean == pytest.approx(0.3)
    wide = beta_from_moments(0.5, 0.5)
    assert wide.variance < 0.25
    assert wide.mean == pytest.approx(0.5)


def test_fast_tables_pass_structural_checks(fast_tables):
    problems = check_tables(fast_tables)
    assert not [p for p in problems if "kernel width" in p or "ggx_norm" in p or "ltc_inv" in p]
    assert set(fast_tables.report) == set(TABLE_TAGS)


def test_ggx_norm_range(fast_tables):
    assert fast_tables.ggx_norm_value(1.0) == pytest.approx(2.0, abs=1e-3)
    assert fast_tables.ggx_norm_value(1e-3) == pytest.approx(1.0, abs=1e-3)
    values = fast_tables.ggx_norm_value(np.linspace(0.001, 1.0, 20))
    assert np.all((values >= 1.0 - 1e-5) & (values <= 2.0 + 1e-5))


def test_convolution_widens_with_kernel(fast_tables):
    alpha = np.array([[0.2, 0.4]])
    narrow = fast_tables.ggx_convolved_alpha(alpha, 0.05)
    wide = fast_tables.ggx_convolved_alpha(alpha, 0.8)
    assert np.all(wide >= narrow - 1e-6)
    sharp_sg = fast_tables.sg_convolved_alpha(alpha, 10.0)
    broad_sg = fast_tables.sg_convolved_alpha(alpha, 0.5)
    assert np.all(broad_sg >= sharp_sg - 1e-6)
    assert np.all((wide >= 1e-3) & (wide <= 1.0))


def test_beta_two_lobes(fast_tables):
    m1, a1, a2 = fast_tables.beta_two_lobes(3.0, 7.0)
    assert 0.0 <= float(m1) <= 1.0
    assert 1e-3 <= float(a1) <= 1.0 and 1e-3 <= float(a2) <= 1.0
    m1, a1, a2 = fast_tables.beta_two_lobes(300.0, 700.0)
    assert float(m1) == 1.0
    assert float(a1) == pytest.approx(0.3) and float(a2) == pytest.approx(0.3)
    assert 300.0 + 700.0 > 2.0 * BETA_RANGE[1]


def test_ltc_inverse(fast_tables):
    alphas = np.array([0.1, 0.5])
    inv = fast_tables.ltc_inverse(alphas)
    assert inv.shape == (2, 3, 3)
    np.testing.assert_allclose(inv[:, 0, 0], 1.0 / alphas, rtol=0.02)
    np.testing.assert_allclose(inv[:, 1, 1], 1.0 / alphas, rtol=0.02)
    np.testing.assert_allclose(inv[:, 0, 2], 0.0, atol=0.02)
    np.testing.assert_allclose(inv[:, 2], [[0.0, 0.0, 1.0]] * 2, atol=1e-7)
    np.testing.assert_allclose(fast_tables.ltc_scale(alphas), alphas, rtol=0.02)
    assert fast_tables.report["ltc_inv"]["max_residual"] <= LTC_FLAG_RESIDUAL


@pytest.mark.parametrize("alpha", [0.3, 0.4, 0.6, 1.0])
def test_ltc_fit_residual(alpha):
    _, inv, err, fallback = _fit_ltc_node((0, alpha, 96))
    assert not fallback
    assert err <= 0.05
    # independent check on a dense quadrature in cos(theta)
    mu, weights = _mu_quadrature()
    dirs = np.stack([np.sqrt(1.0 - mu * mu), np.zeros_like(mu), mu], axis=-1)
    assert relative_error(ltc_density(dirs, inv), ggx_target_density(dirs, alpha), weights) <= 0.05


def test_ltc_density_is_normalized():
    inv = ltc_inverse_from_params(np.array([np.log(2.5), np.log(2.5), 0.0]))
    mu, weights = _mu_quadrature()
    dirs = np.stack([np.sqrt(1.0 - mu * mu), np.zeros_like(mu), mu], axis=-1)
    assert np.sum(weights * ltc_density(dirs, inv)) == pytest.approx(1.0, rel=1e-4)


def test_check_tables_flags_anisotropic_ltc(fast_tables):
    values = fast_tables.ltc_inv.values.copy()
    values[:, 4] *= 1.5
    skewed = replace(fast_tables, ltc_inv=TableGrid("ltc_inv", fast_tables.ltc_inv.axes, values))
    assert "ltc_inv: fitted matrix is not isotropic" in check_tables(skewed)


def test_save_load_round_trip(fast_tables, tmp_path):
    path = save_tables(fast_tables, tmp_path / "tables.abt")
    assert path.read_bytes()[:4] == MAGIC
    loaded = load_tables(path)
    for name in TABLE_TAGS:
        np.testing.assert_array_equal(getattr(loaded, name).values, getattr(fast_tables, name).values)
    assert loaded.settings["sg_grid"] == fast_tables.settings["sg_grid"]
    print("PASS: tables survive a save/load cycle")


def test_load_errors(fast_tables, tmp_path):
    with pytest.raises(TableFormatError):
        load_tables(tmp_path / "missing.abt")
    bad = tmp_path / "bad.abt"
    bad.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(TableFormatError):
        load_tables(bad)

    buf = io.BytesIO()
    serialize_tables(fast_tables, buf)
    raw = buf.getvalue()
    with pytest.raises(TableFormatError):
        deserialize_tables(io.BytesIO(raw[: len(raw) // 2]))


def _rewrite(raw: bytes, drop: bytes = b"", extra: bool = False) -> bytes:
    src = io.BytesIO(raw[4:])
    out = io.BytesIO()
    out.write(MAGIC)
    if extra:
        write_chunk(out, b"XTRA", pack_json({"note": "future field"}))
    while (chunk := read_chunk(src)) is not None:
        if chunk[0] != drop:
            write_chunk(out, *chunk)
    return out.getvalue()


def test_unknown_chunks_are_skipped_and_missing_tables_fail(fast_tables, caplog):
    buf = io.BytesIO()
    serialize_tables(fast_tables, buf)
    raw = buf.getvalue()
    with caplog.at_level(logging.WARNING):
        tables = deserialize_tables(io.BytesIO(_rewrite(raw, extra=True)))
    assert "XTRA" in caplog.text
    assert tables.ggx_norm.values.shape == fast_tables.ggx_norm.values.shape
    with pytest.raises(TableFormatError):
        deserialize_tables(io.BytesIO(_rewrite(raw, drop=TABLE_TAGS["ltc_inv"])))


def test_two_lobe_fit_beats_single_lobe_on_its_own():
    _, values, err, fallback, single_lobe = _fit_beta_node(((0, 0), 2.0, 5.0, 256, (0, 2, 0, 0)))
    assert not single_lobe and not fallback
    assert values[1] < values[2]
    mean = 2.0 / 7.0
    mu, weights = _mu_quadrature()
    target = beta_mixture_density(BetaParams(2.0, 5.0), mu, 256)
    assert err < relative_error(iso_pdf(mu, mean), target, weights)


def test_single_lobe_nodes_are_counted(fast_tables):
    report = fast_tables.report["beta_lobes"]
    assert 0 <= report["single_lobe_nodes"] <= report["nodes"]
    kept = np.all(fast_tables.beta_lobes.values[..., 1:] == fast_tables.beta_lobes.values[..., 1:2], axis=-1)
    kept &= fast_tables.beta_lobes.values[..., 0] == 1.0
    concentrated = np.add.outer(fast_tables.beta_lobes.axes[0], fast_tables.beta_lobes.axes[1]) > 2.0 * BETA_RANGE[1]
    assert report["single_lobe_nodes"] == int(np.count_nonzero(kept & ~concentrated))


@pytest.mark.parametrize("kind, g", [("sg", 3.3), ("ggx", 0.45)])
def test_convolution_node_matches_fresh_monte_carlo(kind, g):
    alpha = np.array([0.4, 0.6])
    _, delta, _, fallback = _fit_conv_node((0, kind, 0.4, 0.6, g, 100_000, 96, (5, 1)))
    assert not fallback
    fitted = alpha + delta
    directions, weights = fit_directions(fitted, 96)
    reference_fn = sg_convolution_reference if kind == "sg" else ggx_convolution_reference
    reference = reference_fn(alpha, g, directions, 20_000, seed=99)
    model = sggx_pdf_batched(np.eye(3), fitted, directions)
    assert relative_error(model, reference, weights) <= 0.05


def test_interpolated_convolutions_track_fresh_monte_carlo(fast_tables):
    rng = np.random.default_rng(3)
    errors = []
    for i in range(40):
        alpha = rng.uniform(0.3, 0.9, 2)
        if i % 2 == 0:
            g = rng.uniform(1.0, 9.0)
            fitted = fast_tables.sg_convolved_alpha(alpha, g)
            reference_fn = sg_convolution_reference
        else:
            g = rng.uniform(0.2, 0.9)
            fitted = fast_tables.ggx_convolved_alpha(alpha, g)
            reference_fn = ggx_convolution_reference
        directions, weights = fit_directions(fitted, 96)
        reference = reference_fn(alpha, g, directions, 20_000, seed=i)
        errors.append(relative_error(sggx_pdf_batched(np.eye(3), fitted, directions), reference, weights))
    assert np.median(errors) <= 0.05
    assert max(errors) <= 0.15
