import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class ImageFormatError(Exception):
    """Raised when an image file has a malformed header or payload."""


@dataclass
class ImageBuffer:
    """Linear radiometric RGB image, rows stored top to bottom."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"ImageBuffer expects (H, W, 3) pixels, got {self.pixels.shape}")
        if self.pixels.shape[0] == 0 or self.pixels.shape[1] == 0:
            raise ValueError("ImageBuffer dimensions must be positive")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def blank(cls, width: int, height: int) -> "ImageBuffer":
        return cls(np.zeros((height, width, 3), dtype=np.float32))


_PFM_HEADER = re.compile(rb"^(PF|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s")


def write_pfm(path: str | Path, image: ImageBuffer) -> None:
    """Little-endian color PFM; scanlines bottom to top as the format requires."""
    data = np.ascontiguousarray(image.pixels[::-1], dtype="<f4")
    header = f"PF\n{image.width} {image.height}\n-1.0\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(data.tobytes())


def read_pfm(path: str | Path) -> ImageBuffer:
    raw = Path(path).read_bytes()
    match = _PFM_HEADER.match(raw)
    if match is None:
        raise ImageFormatError(f"{path}: not a PFM file (bad header)")
    kind, width, height, scale = match.groups()
    width, height = int(width), int(height)
    try:
        scale = float(scale)
    except ValueError:
        raise ImageFormatError(f"{path}: invalid PFM scale {scale!r}")
    if width <= 0 or height <= 0 or scale == 0.0:
        raise ImageFormatError(f"{path}: invalid PFM dimensions or scale")

    channels = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    body = raw[match.end():]
    expected = width * height * channels * 4
    if len(body) < expected:
        raise ImageFormatError(f"{path}: truncated PFM payload ({len(body)} of {expected} bytes)")

    data = np.frombuffer(body[:expected], dtype=dtype).reshape(height, width, channels)
    data = data[::-1].astype(np.float32)
    if channels == 1:
        data = np.repeat(data, 3, axis=2)
    return ImageBuffer(data)


def linear_to_srgb(values: np.ndarray) -> np.ndarray:
    values = np.clip(values, 0.0, 1.0)
    return np.where(values <= 0.0031308, 12.92 * values, 1.055 * np.power(values, 1.0 / 2.4) - 0.055)


def srgb_to_linear(values: np.ndarray) -> np.ndarray:
    values = np.clip(values, 0.0, 1.0)
    return np.where(values <= 0.04045, values / 12.92, np.power((values + 0.055) / 1.055, 2.4))


def write_png(path: str | Path, image: ImageBuffer, exposure: float = 0.0) -> None:
    """8-bit sRGB preview; negative values clamp to black."""
    scaled = image.pixels * np.float32(2.0 ** exposure)
    encoded = np.round(linear_to_srgb(scaled) * 255.0).astype(np.uint8)
    Image.fromarray(encoded, mode="RGB").save(path)


def read_png(path: str | Path, linearize: bool = True) -> ImageBuffer:
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as e:
        raise ImageFormatError(f"{path}: cannot decode image ({e})")
    if linearize:
        data = srgb_to_linear(data)
    return ImageBuffer(data.astype(np.float32))


def read_image(path: str | Path, linearize: bool = True) -> ImageBuffer:
    """Dispatches on extension: .pfm is linear float, everything else goes through Pillow."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Image not found: {path}")
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    return read_png(path, linearize=linearize)


def write_image(path: str | Path, image: ImageBuffer, exposure: float = 0.0) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".pfm":
        write_pfm(path, image)
    else:
        write_png(path, image, exposure=exposure)
    logging.info(f"Wrote {image.width}x{image.height} image to {path}")
