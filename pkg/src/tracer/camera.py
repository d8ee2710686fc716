from dataclasses import dataclass

import numpy as np

from src.core.spherical import normalize
from src.protocols.scene_types import CameraDocument


@dataclass(frozen=True)
class PinholeCamera:
    """Pinhole camera; pixel (0, 0) is the top-left corner of the image."""

    position: np.ndarray
    forward: np.ndarray
    right: np.ndarray
    up: np.ndarray
    fov_deg: float
    width: int
    height: int

    @classmethod
    def look_at(cls, position, target, up=(0.0, 0.0, 1.0), fov_deg: float = 40.0, width: int = 64, height: int = 64) -> "PinholeCamera":
        position = np.asarray(position, dtype=np.float64)
        forward = normalize(np.asarray(target, dtype=np.float64) - position)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-12:
            raise ValueError("camera up vector is parallel to the view direction")
        right = normalize(right)
        true_up = np.cross(right, forward)
        return cls(position, forward, right, true_up, float(fov_deg), int(width), int(height))

    @classmethod
    def from_document(cls, doc: CameraDocument) -> "PinholeCamera":
        return cls.look_at(doc.position, doc.look_at, doc.up, doc.fov_deg, doc.width, doc.height)

    @property
    def tan_half_fov(self) -> float:
        return float(np.tan(0.5 * np.radians(self.fov_deg)))

    def pixel_aperture(self) -> float:
        """Full cone angle subtended by one pixel at the image center."""
        return float(2.0 * np.arctan(self.tan_half_fov / self.height))

    def generate_rays(self, px: np.ndarray, py: np.ndarray, jitter: np.ndarray):
        """
        Primary rays through pixel (px, py) at sub-pixel offsets ``jitter``
        in [0, 1)^2 (box filter). Returns (origins, directions).
        """
        aspect = self.width / self.height
        sx = (2.0 * (np.asarray(px) + jitter[:, 0]) / self.width - 1.0) * self.tan_half_fov * aspect
        sy = (1.0 - 2.0 * (np.asarray(py) + jitter[:, 1]) / self.height) * self.tan_half_fov
        directions = normalize(self.forward + sx[:, None] * self.right + sy[:, None] * self.up)
        origins = np.broadcast_to(self.position, directions.shape).copy()
        return origins, directions
