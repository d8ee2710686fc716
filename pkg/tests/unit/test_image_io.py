import numpy as np
import pytest
from PIL import Image

from src.utils.image_io import (
    ImageBuffer,
    ImageFormatError,
    read_image,
    read_pfm,
    write_image,
    write_pfm,
    write_png,
)


def test_image_buffer_validates_shape():
    with pytest.raises(ValueError):
        ImageBuffer(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        ImageBuffer(np.zeros((0, 4, 3)))
    blank = ImageBuffer.blank(5, 3)
    assert (blank.width, blank.height) == (5, 3)
    assert blank.pixels.dtype == np.float32


def test_pfm_round_trip_is_bitwise(tmp_path):
    pixels = np.random.default_rng(2).normal(size=(7, 5, 3)).astype(np.float32)
    pixels[0, 0] = [1e-30, 65504.0, -3.5]
    path = tmp_path / "image.pfm"
    write_pfm(path, ImageBuffer(pixels))
    back = read_pfm(path)
    assert back.pixels.tobytes() == pixels.tobytes()


def test_pfm_rows_are_stored_bottom_up(tmp_path):
    pixels = np.zeros((2, 1, 3), dtype=np.float32)
    pixels[0] = 1.0
    path = tmp_path / "rows.pfm"
    write_pfm(path, ImageBuffer(pixels))
    body = path.read_bytes()[len(b"PF\n1 2\n-1.0\n"):]
    assert np.frombuffer(body, dtype="<f4")[:3].tolist() == [0.0, 0.0, 0.0]


def test_pfm_errors(tmp_path):
    bad = tmp_path / "bad.pfm"
    bad.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(ImageFormatError):
        read_pfm(bad)
    short = tmp_path / "short.pfm"
    short.write_bytes(b"PF\n2 2\n-1.0\n" + b"\x00" * 10)
    with pytest.raises(ImageFormatError):
        read_pfm(short)


def test_png_encoding(tmp_path):
    pixels = np.zeros((1, 3, 3), dtype=np.float32)
    pixels[0, 0] = 0.5
    pixels[0, 1] = -2.0
    pixels[0, 2] = 4.0
    path = tmp_path / "preview.png"
    write_png(path, ImageBuffer(pixels))
    data = np.asarray(Image.open(path))
    assert data[0, 0].tolist() == [188, 188, 188]
    assert data[0, 1].tolist() == [0, 0, 0]
    assert data[0, 2].tolist() == [255, 255, 255]


def test_read_image_dispatch(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_image(tmp_path / "missing.pfm")
    image = ImageBuffer(np.full((2, 2, 3), 0.25, dtype=np.float32))
    write_image(tmp_path / "sub" / "a.pfm", image)
    write_image(tmp_path / "sub" / "a.png", image)
    assert np.array_equal(read_image(tmp_path / "sub" / "a.pfm").pixels, image.pixels)
    # 8-bit sRGB quantization keeps the linear value close
    np.testing.assert_allclose(read_image(tmp_path / "sub" / "a.png").pixels, 0.25, atol=0.01)
