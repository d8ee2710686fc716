import math

import numpy as np
import pytest

from src.utils.metrics import format_psnr, high_pass_energy, psnr, relative_l2, rmse


def test_identical_images_have_infinite_psnr():
    image = np.random.default_rng(1).random((8, 8, 3))
    assert rmse(image, image) == 0.0
    assert math.isinf(psnr(image, image))
    assert format_psnr(psnr(image, image)) == "inf"


def test_constant_offset():
    a = np.full((4, 4, 3), 0.5)
    b = a + 0.1
    assert rmse(a, b) == pytest.approx(0.1)
    assert psnr(a, b) == pytest.approx(20.0)
    assert format_psnr(psnr(a, b)) == "20.00"


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        rmse(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def test_relative_l2():
    target = np.array([3.0, 4.0])
    assert relative_l2(target, target) == 0.0
    assert relative_l2(np.zeros(2), target) == pytest.approx(1.0)
    assert relative_l2(np.array([1.0, 0.0]), np.zeros(2)) == pytest.approx(1.0)


def test_high_pass_energy_flags_checkerboards():
    flat = np.full((16, 16, 3), 0.3)
    checker = np.indices((16, 16)).sum(axis=0) % 2
    checker = np.repeat(checker[..., None], 3, axis=2).astype(np.float64)
    assert high_pass_energy(flat) == 0.0
    assert high_pass_energy(checker) > 1.0
