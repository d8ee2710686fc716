"""
Spherical plumbing: orthonormal frames, area-preserving square mappings,
spherical Gaussians and the SG fit of the clamped cosine.

All functions are vectorized over leading axes; directions are (..., 3)
arrays and square points are (..., 2) arrays with (u, v) in [0, 1]^2.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import least_squares

FOUR_PI = 4.0 * np.pi
KAPPA_RANGE = (0.5, 10.0)


def normalize(v: np.ndarray, eps: float = 1e-300) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norm, eps)


def dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(np.asarray(a) * np.asarray(b), axis=-1)


# ---------------------------------------------------------------------------
# Frames
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Frame:
    """Right-handed orthonormal basis (t, b, n)."""

    t: np.ndarray
    b: np.ndarray
    n: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        """Rows are t, b, n: ``matrix @ v`` maps world to local."""
        return np.stack([self.t, self.b, self.n])

    def to_local(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=np.float64) @ self.matrix.T

    def to_world(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=np.float64) @ self.matrix

    @classmethod
    def from_matrix(cls, rows: np.ndarray) -> "Frame":
        rows = np.asarray(rows, dtype=np.float64)
        return cls(rows[0].copy(), rows[1].copy(), rows[2].copy())


def build_frames(n: np.ndarray) -> np.ndarray:
    """
    Branchless orthonormal basis for many normals.

    Returns (..., 3, 3) matrices whose rows are (t, b, n).
    """
    n = np.asarray(n, dtype=np.float64)
    length = np.linalg.norm(n, axis=-1)
    if np.any(length < 1e-12):
        raise ValueError("build_frame: zero-length normal")
    n = n / length[..., None]
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    sign = np.copysign(1.0, z)
    a = -1.0 / (sign + z)
    b = x * y * a
    t = np.stack([1.0 + sign * x * x * a, sign * b, -sign * x], axis=-1)
    bt = np.stack([b, sign + y * y * a, -y], axis=-1)
    return np.stack([t, bt, n], axis=-2)


def build_frame(n: np.ndarray) -> Frame:
    return Frame.from_matrix(build_frames(np.asarray(n, dtype=np.float64).reshape(3)))


def frames_to_local(frames: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Batched world-to-local: frames (..., 3, 3), v (..., 3)."""
    return np.einsum("...ij,...j->...i", frames, v)


def frames_to_world(frames: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ji,...j->...i", frames, v)


# ---------------------------------------------------------------------------
# Square <-> sphere mappings
# ---------------------------------------------------------------------------


def equal_area_square_to_sphere(p: np.ndarray) -> np.ndarray:
    """Octahedral equal-area map; square center is +z, corners are -z."""
    p = np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0)
    u = 2.0 * p[..., 0] - 1.0
    v = 2.0 * p[..., 1] - 1.0
    up = np.abs(u)
    vp = np.abs(v)
    signed_distance = 1.0 - (up + vp)
    r = 1.0 - np.abs(signed_distance)
    safe_r = np.where(r == 0.0, 1.0, r)
    phi = np.where(r == 0.0, 1.0, (vp - up) / safe_r + 1.0) * (np.pi / 4.0)
    z = np.copysign(1.0 - r * r, signed_distance)
    cos_phi = np.copysign(np.cos(phi), u)
    sin_phi = np.copysign(np.sin(phi), v)
    s = r * np.sqrt(np.maximum(2.0 - r * r, 0.0))
    return np.stack([cos_phi * s, sin_phi * s, z], axis=-1)


def equal_area_sphere_to_square(d: np.ndarray) -> np.ndarray:
    d = normalize(d)
    x = np.abs(d[..., 0])
    y = np.abs(d[..., 1])
    z = np.abs(d[..., 2])
    r = np.sqrt(np.maximum(1.0 - z, 0.0))
    a = np.maximum(x, y)
    b = np.minimum(x, y)
    b = np.where(a == 0.0, 0.0, b / np.where(a == 0.0, 1.0, a))
    phi = np.arctan(b) * (2.0 / np.pi)
    phi = np.where(x < y, 1.0 - phi, phi)
    v = phi * r
    u = r - v
    lower = d[..., 2] < 0.0
    u, v = np.where(lower, 1.0 - v, u), np.where(lower, 1.0 - u, v)
    u = np.copysign(u, d[..., 0])
    v = np.copysign(v, d[..., 1])
    return np.clip(np.stack([0.5 * (u + 1.0), 0.5 * (v + 1.0)], axis=-1), 0.0, 1.0)


def concentric_square_to_disk(p: np.ndarray) -> np.ndarray:
    """Shirley-Chiu concentric map from [0,1]^2 to the unit disk."""
    p = np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0)
    ux = 2.0 * p[..., 0] - 1.0
    uy = 2.0 * p[..., 1] - 1.0
    horizontal = np.abs(ux) > np.abs(uy)
    safe_ux = np.where(ux == 0.0, 1.0, ux)
    safe_uy = np.where(uy == 0.0, 1.0, uy)
    r = np.where(horizontal, ux, uy)
    theta = np.where(
        horizontal,
        (np.pi / 4.0) * (uy / safe_ux),
        (np.pi / 2.0) - (np.pi / 4.0) * (ux / safe_uy),
    )
    out = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)
    origin = (ux == 0.0) & (uy == 0.0)
    return np.where(origin[..., None], 0.0, out)


def concentric_disk_to_square(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    x, y = d[..., 0], d[..., 1]
    radius = np.hypot(x, y)
    phi = np.arctan2(y, x)
    k = 4.0 / np.pi

    right = np.abs(phi) <= np.pi / 4.0
    left = np.abs(phi) >= 3.0 * np.pi / 4.0
    top = (phi > np.pi / 4.0) & (phi < 3.0 * np.pi / 4.0)

    theta_left = np.where(phi > 0.0, phi - np.pi, phi + np.pi)
    theta_bottom = phi + np.pi

    ux = np.select(
        [right, left, top],
        [radius, -radius, radius * (np.pi / 2.0 - phi) * k],
        default=-radius * (np.pi / 2.0 - theta_bottom) * k,
    )
    uy = np.select(
        [right, left, top],
        [radius * phi * k, -radius * theta_left * k, radius],
        default=-radius,
    )
    return np.clip(np.stack([0.5 * (ux + 1.0), 0.5 * (uy + 1.0)], axis=-1), 0.0, 1.0)


def concentric_square_to_hemisphere(p: np.ndarray) -> np.ndarray:
    """Area-preserving square-to-hemisphere map; (0.5, 0.5) is the zenith."""
    d = concentric_square_to_disk(p)
    r2 = np.sum(d * d, axis=-1)
    s = np.sqrt(np.maximum(2.0 - r2, 0.0))
    return np.stack([d[..., 0] * s, d[..., 1] * s, 1.0 - r2], axis=-1)


def concentric_hemisphere_to_square(w: np.ndarray) -> np.ndarray:
    w = normalize(w)
    z = np.clip(w[..., 2], 0.0, 1.0)
    scale = 1.0 / np.sqrt(1.0 + z)
    d = np.stack([w[..., 0] * scale, w[..., 1] * scale], axis=-1)
    return concentric_disk_to_square(d)


def uniform_sphere(u: np.ndarray) -> np.ndarray:
    """Maps uniform (..., 2) numbers to uniform directions."""
    u = np.asarray(u, dtype=np.float64)
    z = 1.0 - 2.0 * u[..., 0]
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    phi = 2.0 * np.pi * u[..., 1]
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def cosine_hemisphere(u: np.ndarray) -> np.ndarray:
    d = concentric_square_to_disk(u)
    z = np.sqrt(np.maximum(1.0 - np.sum(d * d, axis=-1), 0.0))
    return np.concatenate([d, z[..., None]], axis=-1)


def fibonacci_sphere(n: int) -> np.ndarray:
    """Deterministic, nearly uniform point set on the sphere."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def square_to_texel(p: np.ndarray, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Texel (row, col) of a square point; row follows v, col follows u."""
    p = np.asarray(p, dtype=np.float64)
    col = np.clip((p[..., 0] * resolution).astype(np.int64), 0, resolution - 1)
    row = np.clip((p[..., 1] * resolution).astype(np.int64), 0, resolution - 1)
    return row, col


def texel_centers(resolution: int) -> np.ndarray:
    """(res, res, 2) square coordinates of texel centers, indexed [row, col]."""
    c = (np.arange(resolution, dtype=np.float64) + 0.5) / resolution
    cols, rows = np.meshgrid(c, c)
    return np.stack([cols, rows], axis=-1)


# ---------------------------------------------------------------------------
# Spherical Gaussians
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SgLobe:
    """amplitude * exp(kappa * (axis . w - 1))"""

    axis: np.ndarray
    kappa: float
    amplitude: float

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-6:
            raise ValueError("SgLobe axis must be a unit vector")
        if self.kappa < 0.0 or self.amplitude < 0.0:
            raise ValueError("SgLobe needs kappa >= 0 and amplitude >= 0")
        object.__setattr__(self, "axis", axis)


def sg_eval(lobe: SgLobe, w: np.ndarray) -> np.ndarray:
    return lobe.amplitude * np.exp(lobe.kappa * (dot(w, lobe.axis) - 1.0))


def sg_product(l1: SgLobe, l2: SgLobe) -> SgLobe:
    um = l1.kappa * l1.axis + l2.kappa * l2.axis
    kappa = float(np.linalg.norm(um))
    if kappa < 1e-12:
        axis = np.array([0.0, 0.0, 1.0])
        kappa = 0.0
    else:
        axis = um / kappa
    amplitude = l1.amplitude * l2.amplitude * float(np.exp(kappa - l1.kappa - l2.kappa))
    return SgLobe(axis, kappa, amplitude)


def sg_kernel_integral(kappa: np.ndarray) -> np.ndarray:
    """Integral over the sphere of exp(kappa * (mu - 1)); 4*pi at kappa = 0."""
    kappa = np.asarray(kappa, dtype=np.float64)
    safe = np.where(kappa < 1e-8, 1.0, kappa)
    return np.where(kappa < 1e-8, FOUR_PI, 2.0 * np.pi * (-np.expm1(-2.0 * safe)) / safe)


def sg_integral(lobe: SgLobe) -> float:
    return float(lobe.amplitude * sg_kernel_integral(lobe.kappa))


def _clamped_cosine_quadrature(n: int = 128):
    x, w = np.polynomial.legendre.leggauss(n)
    # Two panels so the kink at mu = 0 sits on a panel boundary
    mu = np.concatenate([0.5 * (x - 1.0), 0.5 * (x + 1.0)])
    weights = np.concatenate([0.5 * w, 0.5 * w]) * 2.0 * np.pi
    return mu, weights


def _clamped_cosine_residual(params, mu, sqrt_w):
    amplitude, kappa = params
    return sqrt_w * (amplitude * np.exp(kappa * (mu - 1.0)) - np.maximum(mu, 0.0))


def _grid_search_clamped_cosine(mu, weights) -> tuple[float, float]:
    best = (np.inf, 1.0, 2.0)
    target = np.maximum(mu, 0.0)
    for kappa in np.linspace(*KAPPA_RANGE, 400):
        basis = np.exp(kappa * (mu - 1.0))
        amplitude = np.sum(weights * basis * target) / np.sum(weights * basis * basis)
        err = np.sum(weights * (amplitude * basis - target) ** 2)
        if err < best[0]:
            best = (err, amplitude, kappa)
    return best[1], best[2]


@lru_cache(maxsize=1)
def fit_clamped_cosine_sg() -> SgLobe:
    """
    One-time L2 fit of a * exp(kappa (mu - 1)) to max(mu, 0) over the whole
    sphere (zero on the back half). Axis is +z; callers rotate it.
    """
    mu, weights = _clamped_cosine_quadrature()
    sqrt_w = np.sqrt(weights)
    try:
        result = least_squares(
            _clamped_cosine_residual,
            x0=[1.17, 2.13],
            args=(mu, sqrt_w),
            bounds=([0.0, KAPPA_RANGE[0]], [10.0, KAPPA_RANGE[1]]),
        )
        if not result.success:
            raise RuntimeError(result.message)
        amplitude, kappa = (float(v) for v in result.x)
    except (RuntimeError, ValueError) as e:
        logging.warning(f"Clamped-cosine SG fit failed ({e}); using grid search")
        amplitude, kappa = _grid_search_clamped_cosine(mu, weights)
    return SgLobe(np.array([0.0, 0.0, 1.0]), kappa, amplitude)


def clamped_cosine_fit_error() -> float:
    """Relative L2 error of the fitted SG over the sphere."""
    lobe = fit_clamped_cosine_sg()
    mu, weights = _clamped_cosine_quadrature()
    fit = lobe.amplitude * np.exp(lobe.kappa * (mu - 1.0))
    target = np.maximum(mu, 0.0)
    return float(np.sqrt(np.sum(weights * (fit - target) ** 2) / np.sum(weights * target ** 2)))
