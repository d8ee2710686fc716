"""
Simplified Disney BRDF: Lambertian diffuse plus a GGX specular lobe whose
Schlick Fresnel blends a metallic (basecolor) and a dielectric (specular
intensity) normal-incidence reflectance. No sheen, clearcoat or retro
reflection. Surfaces are double-sided: the normal is flipped toward wo.

Every function is vectorized over N shading points.
"""

from typing import NamedTuple

import numpy as np

from src.core.sggx import ALPHA_MIN
from src.core.spherical import build_frames, frames_to_world, normalize

GRAZING_EPS = 1e-7


class DisneyParams(NamedTuple):
    basecolor: np.ndarray  # (N, 3)
    roughness: np.ndarray  # (N,)
    metallic: np.ndarray  # (N,)
    specular: np.ndarray  # (N,)

    def take(self, index) -> "DisneyParams":
        return DisneyParams(self.basecolor[index], self.roughness[index], self.metallic[index], self.specular[index])

    @classmethod
    def constant(cls, n: int, basecolor=(0.8, 0.8, 0.8), roughness=0.5, metallic=0.0, specular=0.5) -> "DisneyParams":
        return cls(
            np.tile(np.asarray(basecolor, dtype=np.float64), (n, 1)),
            np.full(n, float(roughness)),
            np.full(n, float(metallic)),
            np.full(n, float(specular)),
        )


def _ggx_d(cos_h: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    a2 = alpha * alpha
    c2 = cos_h * cos_h
    q = c2 * a2 + (1.0 - c2)
    return a2 / (np.pi * q * q)


def _smith_lambda(cos_t: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    c2 = np.maximum(cos_t * cos_t, 1e-300)
    tan2 = np.maximum(1.0 - c2, 0.0) / c2
    return 0.5 * (np.sqrt(1.0 + alpha * alpha * tan2) - 1.0)


def smith_g(cos_i: np.ndarray, cos_o: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Height-correlated masking-shadowing."""
    return 1.0 / (1.0 + _smith_lambda(cos_i, alpha) + _smith_lambda(cos_o, alpha))


def schlick_weight(cos_d: np.ndarray) -> np.ndarray:
    return (1.0 - np.clip(np.abs(cos_d), 0.0, 1.0)) ** 5


def _oriented(normal: np.ndarray, wo: np.ndarray) -> np.ndarray:
    side = np.where(np.sum(normal * wo, axis=-1) < 0.0, -1.0, 1.0)
    return normal * side[..., None]


def disney_eval(params: DisneyParams, normal: np.ndarray, wi: np.ndarray, wo: np.ndarray) -> np.ndarray:
    """(N, 3) BRDF values; zero when wi and wo are on different sides or grazing."""
    n = _oriented(normal, wo)
    cos_i = np.sum(n * wi, axis=-1)
    cos_o = np.sum(n * wo, axis=-1)
    valid = (cos_i > GRAZING_EPS) & (cos_o > GRAZING_EPS)

    metallic = params.metallic[:, None]
    diffuse = (1.0 - metallic) * params.basecolor / np.pi

    h = normalize(wi + wo)
    alpha = np.maximum(params.roughness, ALPHA_MIN)
    d = _ggx_d(np.sum(n * h, axis=-1), alpha)
    g = smith_g(cos_i, cos_o, alpha)
    fc = schlick_weight(np.sum(h * wo, axis=-1))[:, None]
    r0 = metallic * params.basecolor + (1.0 - metallic) * params.specular[:, None]
    fresnel = r0 * (1.0 - fc) + fc
    denom = 4.0 * np.maximum(cos_i, GRAZING_EPS) * np.maximum(cos_o, GRAZING_EPS)
    specular = (d * g / denom)[:, None] * fresnel

    return np.where(valid[:, None], diffuse + specular, 0.0)


def _specular_probability(params: DisneyParams) -> np.ndarray:
    return np.full(len(params.roughness), 0.5)


def disney_pdf(params: DisneyParams, normal: np.ndarray, wi: np.ndarray, wo: np.ndarray) -> np.ndarray:
    """Solid-angle pdf of ``disney_sample`` for wi."""
    n = _oriented(normal, wo)
    cos_i = np.sum(n * wi, axis=-1)
    cos_o = np.sum(n * wo, axis=-1)
    h = normalize(wi + wo)
    alpha = np.maximum(params.roughness, ALPHA_MIN)
    cos_h = np.sum(n * h, axis=-1)
    pdf_h = _ggx_d(cos_h, alpha) * np.abs(cos_h)
    spec = pdf_h / (4.0 * np.maximum(np.abs(np.sum(h * wo, axis=-1)), GRAZING_EPS))
    diff = np.maximum(cos_i, 0.0) / np.pi
    p_spec = _specular_probability(params)
    pdf = p_spec * spec + (1.0 - p_spec) * diff
    return np.where((cos_i > GRAZING_EPS) & (cos_o > GRAZING_EPS), pdf, 0.0)


def disney_sample(params: DisneyParams, normal: np.ndarray, wo: np.ndarray, rng):
    """
    Mixes cosine-weighted diffuse and GGX half-vector sampling.
    Returns (wi, pdf, value); pdf is zero for invalid samples.
    """
    n = _oriented(normal, wo)
    frames = build_frames(n)
    count = len(n)
    u = rng.random((count, 3))

    r = np.sqrt(u[:, 1])
    phi = 2.0 * np.pi * u[:, 2]
    diffuse_local = np.stack([r * np.cos(phi), r * np.sin(phi), np.sqrt(np.maximum(1.0 - u[:, 1], 0.0))], axis=-1)
    diffuse_dir = frames_to_world(frames, diffuse_local)

    alpha = np.maximum(params.roughness, ALPHA_MIN)
    tan2 = alpha * alpha * u[:, 1] / np.maximum(1.0 - u[:, 1], 1e-12)
    cos_t = 1.0 / np.sqrt(1.0 + tan2)
    sin_t = np.sqrt(np.maximum(1.0 - cos_t * cos_t, 0.0))
    h = frames_to_world(frames, np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=-1))
    specular_dir = 2.0 * np.sum(h * wo, axis=-1)[:, None] * h - wo

    pick_specular = u[:, 0] < _specular_probability(params)
    wi = normalize(np.where(pick_specular[:, None], specular_dir, diffuse_dir))
    pdf = disney_pdf(params, n, wi, wo)
    value = disney_eval(params, n, wi, wo)
    return wi, pdf, value
