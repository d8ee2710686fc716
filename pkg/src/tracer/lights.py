"""
Light sources and the light-sampling half of next-event estimation.

The environment is a lat-long map with z up: u = phi / 2pi with
phi = atan2(y, x) in [0, 2pi), v = theta / pi with theta measured from +z.
Row 0 of the map is v = 0 (the zenith). It is importance-sampled by a
piecewise-constant distribution over texels proportional to luminance
times sin(theta).
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np

from src.core.spherical import normalize

LUMINANCE = np.array([0.2126, 0.7152, 0.0722])


@dataclass
class EnvironmentLight:
    radiance: np.ndarray  # (H, W, 3)
    _cdf: np.ndarray = field(init=False, repr=False)
    _texel_pdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.radiance = np.asarray(self.radiance, dtype=np.float64)
        if self.radiance.ndim != 3 or self.radiance.shape[2] != 3:
            raise ValueError(f"EnvironmentLight expects an (H, W, 3) map, got {self.radiance.shape}")
        h, w, _ = self.radiance.shape
        theta = (np.arange(h) + 0.5) / h * np.pi
        weight = np.maximum(self.radiance @ LUMINANCE, 0.0) * np.sin(theta)[:, None]
        if weight.sum() <= 0.0:
            weight = np.broadcast_to(np.sin(theta)[:, None], (h, w)).copy()
        self._texel_pdf = weight / weight.sum()
        self._cdf = np.cumsum(self._texel_pdf.ravel())
        self._cdf[-1] = 1.0

    @classmethod
    def constant(cls, rgb=(1.0, 1.0, 1.0)) -> "EnvironmentLight":
        return cls(np.asarray(rgb, dtype=np.float64).reshape(1, 1, 3))

    @property
    def is_constant(self) -> bool:
        return self.radiance.shape[:2] == (1, 1)

    def _texels(self, directions: np.ndarray):
        h, w, _ = self.radiance.shape
        d = normalize(np.asarray(directions, dtype=np.float64))
        phi = np.mod(np.arctan2(d[:, 1], d[:, 0]), 2.0 * np.pi)
        theta = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
        row = np.minimum((theta / np.pi * h).astype(np.int64), h - 1)
        col = np.minimum((phi / (2.0 * np.pi) * w).astype(np.int64), w - 1)
        return row, col, theta

    def eval(self, directions: np.ndarray) -> np.ndarray:
        row, col, _ = self._texels(directions)
        return self.radiance[row, col]

    def pdf(self, directions: np.ndarray) -> np.ndarray:
        """Solid-angle density of ``sample``."""
        h, w, _ = self.radiance.shape
        row, col, theta = self._texels(directions)
        sin_t = np.sin(theta)
        jacobian = (h * w) / (2.0 * np.pi * np.pi * np.maximum(sin_t, 1e-12))
        return np.where(sin_t > 1e-12, self._texel_pdf[row, col] * jacobian, 0.0)

    def sample(self, u: np.ndarray):
        """
        (N, 2) uniforms -> (directions, radiance, pdf). The texel is chosen
        from the flattened CDF with u[:, 0]; the remainder of u[:, 0] and
        u[:, 1] place the point uniformly in (theta, phi) inside it.
        """
        h, w, _ = self.radiance.shape
        index = np.minimum(np.searchsorted(self._cdf, u[:, 0], side="right"), h * w - 1)
        lo = np.where(index > 0, self._cdf[np.maximum(index - 1, 0)], 0.0)
        frac = np.clip((u[:, 0] - lo) / np.maximum(self._cdf[index] - lo, 1e-300), 0.0, 1.0)
        row, col = np.divmod(index, w)
        theta = (row + frac) / h * np.pi
        phi = (col + u[:, 1]) / w * 2.0 * np.pi
        sin_t = np.sin(theta)
        directions = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), np.cos(theta)], axis=-1)
        return directions, self.radiance[row, col], self.pdf(directions)


@dataclass
class DirectionalLight:
    direction: np.ndarray  # toward the light
    irradiance: np.ndarray

    def __post_init__(self):
        self.direction = normalize(np.asarray(self.direction, dtype=np.float64))
        self.irradiance = np.asarray(self.irradiance, dtype=np.float64)


@dataclass
class PointLight:
    position: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.intensity = np.asarray(self.intensity, dtype=np.float64)


Light = Union[EnvironmentLight, DirectionalLight, PointLight]


class LightSample(NamedTuple):
    wi: np.ndarray  # (N, 3) toward the light
    radiance: np.ndarray  # (N, 3) incident radiance, or irradiance for delta lights
    distance: np.ndarray  # (N,) inf for distant lights
    pdf: np.ndarray  # (N,) includes the light selection probability
    delta: np.ndarray  # (N,) bool


@dataclass
class LightSet:
    """All lights of a scene; NEE picks one uniformly per sample."""

    lights: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.lights)

    @property
    def environment(self) -> EnvironmentLight | None:
        for light in self.lights:
            if isinstance(light, EnvironmentLight):
                return light
        return None

    def background(self, directions: np.ndarray) -> np.ndarray:
        """Radiance seen along rays that escape the scene."""
        env = self.environment
        if env is None:
            return np.zeros((len(directions), 3))
        return env.eval(directions)

    def environment_pdf(self, directions: np.ndarray) -> np.ndarray:
        """Density with which ``sample`` produces ``directions`` through the environment."""
        env = self.environment
        if env is None:
            return np.zeros(len(directions))
        return env.pdf(directions) / len(self.lights)

    def sample(self, points: np.ndarray, u: np.ndarray) -> LightSample:
        """u is (N, 3): light selection, then two for the light itself."""
        n = len(points)
        wi = np.tile([0.0, 0.0, 1.0], (n, 1))
        radiance = np.zeros((n, 3))
        distance = np.full(n, np.inf)
        pdf = np.zeros(n)
        delta = np.zeros(n, dtype=bool)
        if not self.lights:
            return LightSample(wi, radiance, distance, pdf, delta)

        count = len(self.lights)
        choice = np.minimum((u[:, 0] * count).astype(np.int64), count - 1)
        for index, light in enumerate(self.lights):
            sel = choice == index
            if not np.any(sel):
                continue
            if isinstance(light, EnvironmentLight):
                d, le, p = light.sample(u[sel, 1:3])
                wi[sel], radiance[sel], pdf[sel] = d, le, p / count
            elif isinstance(light, DirectionalLight):
                wi[sel] = light.direction
                radiance[sel] = light.irradiance
                pdf[sel] = 1.0 / count
                delta[sel] = True
            else:
                offset = light.position - points[sel]
                dist = np.linalg.norm(offset, axis=-1)
                wi[sel] = offset / np.maximum(dist, 1e-300)[:, None]
                radiance[sel] = light.intensity / np.maximum(dist * dist, 1e-300)[:, None]
                distance[sel] = dist
                pdf[sel] = 1.0 / count
                delta[sel] = True
        return LightSample(wi, radiance, distance, pdf, delta)


def balance_heuristic(pdf_a: np.ndarray, pdf_b: np.ndarray) -> np.ndarray:
    total = pdf_a + pdf_b
    return np.where(total > 0.0, pdf_a / np.where(total > 0.0, total, 1.0), 0.0)
