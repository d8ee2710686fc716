"""
Factored aggregated BSDF of a voxel.

The stored statistics (NDF mixture, beta roughness, material moments and
directional moments) are combined with the precomputed tables into

    |A| * [ (E[bc] - E[bm bc]) / pi * I_diffuse
          + 1/4 ((1 - Fc) R + Fc) * D_specular ]

where the |A|_wo normalization is left to the caller (it cancels against
the primitive coverage during rendering). Orientation integrals are taken
over the symmetric NDF and multiplied by 2 so a double-sided plane gives
|n.wi| |n.wo| for same-side directions.

All heavy functions take an ``AbsdfBatch`` (struct of arrays) so thousands
of voxel/direction pairs are shaded per call.
"""

import logging
from dataclasses import dataclass, fields, replace
from typing import Callable, Literal, Optional

import numpy as np
from numba import jit

from src.core.sggx import (
    ALPHA_MIN,
    MAX_LOBES,
    NdfMixture,
    fit_ndf_mixture,
    ggx_hemisphere_integral,
    quadrature_nodes,
    sample_sggx_density,
    sggx_pdf_batched,
    sggx_smith_g_batched,
)
from src.core.spherical import (
    build_frames,
    equal_area_sphere_to_square,
    fit_clamped_cosine_sg,
    frames_to_world,
    normalize,
    sg_kernel_integral,
    square_to_texel,
    uniform_sphere,
)
from src.core.tables import BetaParams, PrecompTables, beta_from_moments
from src.tracer.disney import DisneyParams, disney_eval
from src.utils.rng import halton_pairs, hash_keys, to_unit_float

DIR_GRID = 3
SPECULAR_KERNEL = 0
DIFFUSE_KERNEL = 1
DIR_CHANNELS = 8
MAX_RESAMPLE = 8
HALF_VECTOR_EPS = 1e-6


class UndefinedProjectionError(Exception):
    """Raised when the projected area toward a direction is zero."""


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MomentSet:
    """Means and mixed second moments of the material parameters."""

    basecolor: np.ndarray
    metal_basecolor: np.ndarray
    specular: float
    metal_specular: float
    roughness: float
    roughness_sq: float

    def __post_init__(self):
        object.__setattr__(self, "basecolor", np.asarray(self.basecolor, dtype=np.float64).reshape(3))
        object.__setattr__(self, "metal_basecolor", np.asarray(self.metal_basecolor, dtype=np.float64).reshape(3))
        values = self.to_array()
        if np.any(values < -1e-6) or np.any(values > 1.0 + 1e-6):
            raise ValueError("MomentSet values must lie in [0, 1]")
        if self.roughness_sq < self.roughness ** 2 - 1e-6:
            raise ValueError("MomentSet: E[a^2] < E[a]^2")

    def to_array(self) -> np.ndarray:
        return np.concatenate([
            self.basecolor,
            self.metal_basecolor,
            [self.specular, self.metal_specular, self.roughness, self.roughness_sq],
        ])

    @classmethod
    def from_array(cls, values: np.ndarray) -> "MomentSet":
        v = np.asarray(values, dtype=np.float64)
        return cls(v[0:3], v[3:6], float(v[6]), float(v[7]), float(v[8]), float(v[9]))

    @classmethod
    def from_params(cls, params: DisneyParams, weights: Optional[np.ndarray] = None) -> "MomentSet":
        n = len(params.roughness)
        w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64) / np.sum(weights)
        metal = params.metallic
        values = np.concatenate([
            w @ params.basecolor,
            w @ (metal[:, None] * params.basecolor),
            [w @ params.specular, w @ (metal * params.specular), w @ params.roughness, w @ params.roughness ** 2],
        ])
        values = np.clip(values, 0.0, 1.0)
        values[9] = max(values[9], values[8] ** 2)
        return cls.from_array(values)

    @property
    def diffuse_albedo(self) -> np.ndarray:
        return self.basecolor - self.metal_basecolor

    @property
    def specular_reflectance(self) -> np.ndarray:
        return self.metal_basecolor + self.specular - self.metal_specular

    @property
    def roughness_variance(self) -> float:
        return max(self.roughness_sq - self.roughness ** 2, 0.0)


def directional_channels(params: DisneyParams) -> np.ndarray:
    """Per-sample (bc, bm*bc, bs, bm*bs) rows, (N, 8)."""
    metal = params.metallic
    return np.concatenate([
        params.basecolor,
        metal[:, None] * params.basecolor,
        params.specular[:, None],
        (metal * params.specular)[:, None],
    ], axis=1)


@dataclass(frozen=True)
class DirectionalMomentGrid:
    """
    Per kernel family (0 specular, 1 diffuse) a 3x3 equal-area partition of
    the sphere holding normalized (bc, bm*bc, bs, bm*bs) means and the splat
    mass that normalized them. Cells with zero mass are empty.
    """

    values: np.ndarray
    mass: np.ndarray
    global_values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(2, DIR_GRID, DIR_GRID, DIR_CHANNELS)
        mass = np.asarray(self.mass, dtype=np.float64).reshape(2, DIR_GRID, DIR_GRID)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mass", mass)
        object.__setattr__(self, "global_values", np.asarray(self.global_values, dtype=np.float64).reshape(DIR_CHANNELS))

    @property
    def empty(self) -> np.ndarray:
        return self.mass <= 0.0

    @classmethod
    def constant(cls, moments: MomentSet) -> "DirectionalMomentGrid":
        g = moments.to_array()[:DIR_CHANNELS]
        return cls(np.broadcast_to(g, (2, DIR_GRID, DIR_GRID, DIR_CHANNELS)), np.ones((2, DIR_GRID, DIR_GRID)), g)


def direction_cell(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return square_to_texel(equal_area_sphere_to_square(w), DIR_GRID)


def _query_cells(values, mass, fallback, w):
    """values (B,3,3,C), mass (B,3,3), fallback (B,C), w (B,3)."""
    idx = np.arange(len(w))
    row, col = direction_cell(w)
    primary = values[idx, row, col]
    ok = mass[idx, row, col] > 0.0
    row2, col2 = direction_cell(-w)
    mirrored = values[idx, row2, col2]
    ok2 = mass[idx, row2, col2] > 0.0
    return np.where(ok[:, None], primary, np.where(ok2[:, None], mirrored, fallback))


def query_dir_moments(grid: DirectionalMomentGrid, w_h: np.ndarray, kernel: int = SPECULAR_KERNEL) -> np.ndarray:
    """Cell lookup at w_h, falling back to -w_h and then to the global moments."""
    w = np.atleast_2d(normalize(w_h))
    values = np.broadcast_to(grid.values[kernel], (len(w),) + grid.values.shape[1:])
    mass = np.broadcast_to(grid.mass[kernel], (len(w),) + grid.mass.shape[1:])
    fallback = np.broadcast_to(grid.global_values, (len(w), DIR_CHANNELS))
    out = _query_cells(values, mass, fallback, w)
    return out[0] if np.ndim(w_h) == 1 else out


def splat_directional_moments(
    normals: np.ndarray,
    roughness: np.ndarray,
    channels: np.ndarray,
    points: int = 16,
    seed: int = 0,
) -> DirectionalMomentGrid:
    """
    Splats every sample's channels onto the 3x3 cells through its kernel,
    warping a rotated (2, 3) Halton set: the GGX lobe of the sample's
    roughness around its normal (specular) and the clamped-cosine SG
    (diffuse). Cells are normalized by their accumulated kernel mass.
    """
    normals = normalize(np.asarray(normals, dtype=np.float64))
    n = len(normals)
    index = np.arange(n)
    shift = np.stack([to_unit_float(hash_keys(seed, index, d)) for d in range(2)], axis=-1)
    q = halton_pairs(points, shift)
    frames = build_frames(normals)[:, None]
    global_values = channels.mean(axis=0)

    # GGX kernel: stretched uniform points weighted by |A u|, single-sided
    alpha = np.maximum(np.asarray(roughness, dtype=np.float64), ALPHA_MIN)
    u = uniform_sphere(q)
    scale = np.stack([alpha, alpha, np.ones(n)], axis=-1)[:, None, :]
    stretched = u * scale
    sigma = np.linalg.norm(stretched, axis=-1)
    local = stretched / sigma[..., None]
    local[..., 2] = np.abs(local[..., 2])
    spec_dirs = frames_to_world(frames, local)
    spec_w = sigma / sigma.sum(axis=1, keepdims=True) * ggx_hemisphere_integral(alpha)[:, None]

    # SG kernel of the clamped-cosine fit
    kappa = fit_clamped_cosine_sg().kappa
    mu = np.clip(1.0 + np.log(q[..., 0] + (1.0 - q[..., 0]) * np.exp(-2.0 * kappa)) / kappa, -1.0, 1.0)
    r = np.sqrt(np.maximum(1.0 - mu * mu, 0.0))
    phi = 2.0 * np.pi * q[..., 1]
    diff_dirs = frames_to_world(frames, np.stack([r * np.cos(phi), r * np.sin(phi), mu], axis=-1))
    diff_w = np.full((n, points), 1.0 / points)

    values = np.empty((2, DIR_GRID, DIR_GRID, DIR_CHANNELS))
    mass = np.empty((2, DIR_GRID, DIR_GRID))
    cells = DIR_GRID * DIR_GRID
    for kernel, (dirs, w) in enumerate(((spec_dirs, spec_w), (diff_dirs, diff_w))):
        row, col = direction_cell(dirs)
        flat = (row * DIR_GRID + col).ravel()
        weights = w.ravel()
        m = np.bincount(flat, weights=weights, minlength=cells)
        sums = np.stack([
            np.bincount(flat, weights=weights * np.repeat(channels[:, c], points), minlength=cells)
            for c in range(DIR_CHANNELS)
        ], axis=-1)
        filled = m > 0.0
        normalized = np.where(filled[:, None], sums / np.where(filled, m, 1.0)[:, None], global_values)
        values[kernel] = np.clip(normalized, 0.0, 1.0).reshape(DIR_GRID, DIR_GRID, DIR_CHANNELS)
        mass[kernel] = m.reshape(DIR_GRID, DIR_GRID)
    return DirectionalMomentGrid(values, mass, global_values)


@dataclass(frozen=True)
class FactoredAbsdf:
    ndf: NdfMixture
    beta: BetaParams
    moments: MomentSet
    dir_moments: DirectionalMomentGrid
    area: float

    def __post_init__(self):
        if not self.area > 0.0:
            raise ValueError(f"FactoredAbsdf area must be positive, got {self.area}")


@dataclass(frozen=True)
class AbsdfOptions:
    diffuse_mode: Literal["quadrature", "sg"] = "quadrature"
    quadrature_nodes: int = 64
    chunk: int = 4096


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


@dataclass
class AbsdfBatch:
    """
    Struct-of-arrays view of B factored ABSDFs. Lobes are padded to
    MAX_LOBES with zero weight. The derived arrays are filled by
    ``prepare_batch`` from the tables.
    """

    rotations: np.ndarray  # (B, K, 3, 3)
    alphas: np.ndarray  # (B, K, 2)
    weights: np.ndarray  # (B, K)
    beta: np.ndarray  # (B, 2)
    moments: np.ndarray  # (B, 10)
    dir_values: np.ndarray  # (B, 2, 3, 3, 8)
    dir_mass: np.ndarray  # (B, 2, 3, 3)
    area: np.ndarray  # (B,)
    spec_alpha: Optional[np.ndarray] = None  # (B, K, 2, 2)
    spec_weight: Optional[np.ndarray] = None  # (B, K, 2)
    micro_norm: Optional[np.ndarray] = None  # (B, 2)
    shape_scale: Optional[np.ndarray] = None  # (B, K, 2)
    diffuse_alpha: Optional[np.ndarray] = None  # (B, K, 2)

    def __len__(self) -> int:
        return len(self.area)

    @property
    def prepared(self) -> bool:
        return self.spec_alpha is not None

    def take(self, index) -> "AbsdfBatch":
        return AbsdfBatch(**{
            f.name: (None if getattr(self, f.name) is None else getattr(self, f.name)[index])
            for f in fields(self)
        })

    @classmethod
    def empty(cls) -> "AbsdfBatch":
        return cls(
            np.zeros((0, MAX_LOBES, 3, 3)), np.ones((0, MAX_LOBES, 2)), np.zeros((0, MAX_LOBES)),
            np.ones((0, 2)), np.zeros((0, 10)), np.zeros((0, 2, DIR_GRID, DIR_GRID, DIR_CHANNELS)),
            np.zeros((0, 2, DIR_GRID, DIR_GRID)), np.zeros(0),
        )

    @classmethod
    def from_absdfs(cls, absdfs: list) -> "AbsdfBatch":
        b = len(absdfs)
        if b == 0:
            return cls.empty()
        rotations = np.broadcast_to(np.eye(3), (b, MAX_LOBES, 3, 3)).copy()
        alphas = np.ones((b, MAX_LOBES, 2))
        weights = np.zeros((b, MAX_LOBES))
        for n, f in enumerate(absdfs):
            k = f.ndf.k
            rotations[n, :k] = f.ndf.rotations
            alphas[n, :k] = f.ndf.alphas
            weights[n, :k] = f.ndf.weights
        return cls(
            rotations,
            alphas,
            weights,
            np.array([[f.beta.a, f.beta.b] for f in absdfs]),
            np.stack([f.moments.to_array() for f in absdfs]),
            np.stack([f.dir_moments.values for f in absdfs]),
            np.stack([f.dir_moments.mass for f in absdfs]),
            np.array([f.area for f in absdfs], dtype=np.float64),
        )

    def global_dir_values(self) -> np.ndarray:
        return self.moments[:, :DIR_CHANNELS]


def diffuse_kappa() -> float:
    return float(fit_clamped_cosine_sg().kappa)


def prepare_batch(batch: AbsdfBatch, tables: PrecompTables) -> AbsdfBatch:
    """Table lookups that depend only on the voxel, done once per batch."""
    m1, a1, a2 = tables.beta_two_lobes(batch.beta[:, 0], batch.beta[:, 1])
    micro_alpha = np.stack([a1, a2], axis=-1)
    micro_weight = np.stack([m1, 1.0 - m1], axis=-1)
    b, k = batch.weights.shape

    base = np.broadcast_to(batch.alphas[:, :, None, :], (b, k, 2, 2))
    kernel = np.broadcast_to(micro_alpha[:, None, :], (b, k, 2))
    spec_alpha = tables.ggx_convolved_alpha(base, kernel)
    effective = np.sqrt(spec_alpha[..., 0] * spec_alpha[..., 1])
    return replace(
        batch,
        spec_alpha=spec_alpha,
        spec_weight=batch.weights[:, :, None] * micro_weight[:, None, :],
        micro_norm=tables.ggx_norm_value(micro_alpha),
        shape_scale=tables.ltc_scale(effective),
        diffuse_alpha=tables.sg_convolved_alpha(batch.alphas, diffuse_kappa()),
    )


# ---------------------------------------------------------------------------
# Shape term (lune integral of D through the LTC)
# ---------------------------------------------------------------------------
#
# With the forward LTC M = diag(a, a, 1) of the fitted inverse, a region P
# of the lobe hemisphere maps to P' = M^-1 P and
#
#     int_P D dw = 1/pi int_P' g(z') dw',   g(z) = sqrt(a^2 + (1 - a^2) z^2)
#
# Since g depends on z' only, the right side is the boundary integral of
# H(z) dphi with H(z) = int_z^1 g, which vanishes at the pole.

_EDGE_NODES, _EDGE_WEIGHTS = np.polynomial.legendre.leggauss(24)
_TAIL_SERIES = 1e-3


@jit(nopython=True, cache=True)
def _lobe_antiderivative(s, a, c):
    a2 = a * a
    g = np.sqrt(max(a2 + c * s * s, 0.0))
    if abs(c) < 1e-10:
        return s * g
    k = np.sqrt(abs(c))
    if c > 0.0:
        return 0.5 * s * g + a2 / (2.0 * k) * np.arcsinh(k * s / a)
    return 0.5 * s * g + a2 / (2.0 * k) * np.arcsin(min(k * s / a, 1.0))


@jit(nopython=True, cache=True)
def _tail_over_radius2(x, y, z, a, c, top):
    """H(z) / (x^2 + y^2), series near the pole."""
    r2 = x * x + y * y
    zp = max(z, -0.5)
    u = r2 / (1.0 + zp)
    if u < _TAIL_SERIES:
        return (1.0 - 0.5 * c * u + a * a * u * u / 6.0) / (1.0 + zp)
    return (top - _lobe_antiderivative(zp, a, c)) / r2


@jit(nopython=True, cache=True)
def _polygon_lobe_integral(poly, count, a, c, top):
    total = 0.0
    for i in range(count):
        p = poly[i]
        q = poly[(i + 1) % count]
        lp = np.sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2])
        lq = np.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2])
        if lp < 1e-12 or lq < 1e-12:
            continue
        p = p / lp
        q = q / lq
        cos_t = min(max(p[0] * q[0] + p[1] * q[1] + p[2] * q[2], -1.0), 1.0)
        e = q - cos_t * p
        le = np.sqrt(e[0] * e[0] + e[1] * e[1] + e[2] * e[2])
        if le < 1e-12:
            continue
        e = e / le
        theta = np.arccos(cos_t)
        edge = 0.0
        for k in range(_EDGE_NODES.shape[0]):
            s = 0.5 * theta * (1.0 + _EDGE_NODES[k])
            cs, sn = np.cos(s), np.sin(s)
            x = cs * p[0] + sn * e[0]
            y = cs * p[1] + sn * e[1]
            z = cs * p[2] + sn * e[2]
            dx = -sn * p[0] + cs * e[0]
            dy = -sn * p[1] + cs * e[1]
            edge += _EDGE_WEIGHTS[k] * _tail_over_radius2(x, y, z, a, c, top) * (x * dy - y * dx)
        total += 0.5 * theta * edge
    return total


@jit(nopython=True, cache=True)
def _clipped_triangle_integral(tri, a, c, top):
    poly = np.empty((4, 3))
    count = 0
    for i in range(3):
        p = tri[i]
        q = tri[(i + 1) % 3]
        p_in = p[2] >= 0.0
        q_in = q[2] >= 0.0
        if p_in:
            poly[count] = p
            count += 1
        if p_in != q_in:
            t = p[2] / (p[2] - q[2])
            poly[count] = p + t * (q - p)
            poly[count, 2] = 0.0
            count += 1
    if count < 3:
        return 0.0
    return abs(_polygon_lobe_integral(poly, count, a, c, top))


@jit(nopython=True, cache=True)
def _onb(n):
    sign = 1.0 if n[2] >= 0.0 else -1.0
    a = -1.0 / (sign + n[2])
    b = n[0] * n[1] * a
    t = np.array([1.0 + sign * n[0] * n[0] * a, sign * b, -sign * n[0]])
    bt = np.array([b, sign + n[1] * n[1] * a, -n[1]])
    return t, bt


@jit(nopython=True, cache=True)
def _shape_term_single(wi, wo, scale):
    h = wi + wo
    hl = np.sqrt(h[0] * h[0] + h[1] * h[1] + h[2] * h[2])
    if hl < 1e-6:
        return 0.0
    h = h / hl
    c = wi[0] * wo[0] + wi[1] * wo[1] + wi[2] * wo[2]
    cr = np.array([wi[1] * wo[2] - wi[2] * wo[1], wi[2] * wo[0] - wi[0] * wo[2], wi[0] * wo[1] - wi[1] * wo[0]])
    cl = np.sqrt(cr[0] * cr[0] + cr[1] * cr[1] + cr[2] * cr[2])
    if cl < 1e-6:
        return 1.0 if c > 0.0 else 0.0
    v = cr / cl
    a = wo - c * wi
    a = a / np.sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])
    b = wi - c * wo
    b = b / np.sqrt(b[0] * b[0] + b[1] * b[1] + b[2] * b[2])

    triangles = np.empty((2, 3, 3))
    triangles[0, 0], triangles[0, 1], triangles[0, 2] = v, a, b
    triangles[1, 0], triangles[1, 1], triangles[1, 2] = a, -v, b

    alpha = min(max(scale, 1e-4), 1.5)
    curvature = 1.0 - alpha * alpha
    top = _lobe_antiderivative(1.0, alpha, curvature)
    # hemisphere integral of the lobe in the same units
    norm = 2.0 * np.pi * (top - _lobe_antiderivative(0.0, alpha, curvature))

    total = 0.0
    tri = np.empty((3, 3))
    for side in range(2):
        n = h if side == 0 else -h
        t, bt = _onb(n)
        for k in range(2):
            for j in range(3):
                p = triangles[k, j]
                tri[j, 0] = (t[0] * p[0] + t[1] * p[1] + t[2] * p[2]) / alpha
                tri[j, 1] = (bt[0] * p[0] + bt[1] * p[1] + bt[2] * p[2]) / alpha
                tri[j, 2] = n[0] * p[0] + n[1] * p[1] + n[2] * p[2]
            total += _clipped_triangle_integral(tri, alpha, curvature, top)
    return min(max(total / norm, 0.0), 1.0)


@jit(nopython=True, cache=True)
def _shape_term_kernel(wi, wo, scale, out):
    for n in range(wi.shape[0]):
        out[n] = _shape_term_single(wi[n], wo[n], scale[n])


def shape_term_scaled(wi: np.ndarray, wo: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Shape term for precomputed LTC scales; wi, wo (N, 3), scale (N,)."""
    wi = np.ascontiguousarray(wi, dtype=np.float64).reshape(-1, 3)
    wo = np.ascontiguousarray(wo, dtype=np.float64).reshape(-1, 3)
    scale = np.ascontiguousarray(np.broadcast_to(scale, (len(wi),)), dtype=np.float64)
    out = np.empty(len(wi))
    _shape_term_kernel(wi, wo, scale, out)
    return out


def shape_term(wi: np.ndarray, wo: np.ndarray, alpha, tables: PrecompTables):
    """
    Fraction of the microfacet lobe D at w_h lying in the lune
    {n : n.wi > 0, n.wo > 0}. D is integrated through the fitted LTC over
    the lune's two spherical triangles. Anisotropic roughness uses
    sqrt(ax * ay).
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim >= 1 and alpha.shape[-1] == 2:
        alpha = np.sqrt(alpha[..., 0] * alpha[..., 1])
    single = np.ndim(wi) == 1
    wi2 = np.atleast_2d(wi)
    wo2 = np.atleast_2d(wo)
    scale = tables.ltc_scale(np.broadcast_to(alpha, (len(wi2),)))
    out = shape_term_scaled(wi2, wo2, scale)
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _half_vectors(wi: np.ndarray, wo: np.ndarray):
    s = wi + wo
    length = np.linalg.norm(s, axis=-1)
    valid = length > HALF_VECTOR_EPS
    h = np.where(valid[:, None], s / np.maximum(length, 1e-300)[:, None], np.array([0.0, 0.0, 1.0]))
    return h, length, valid


def _diffuse_quadrature(batch: AbsdfBatch, wi, wo, options: AbsdfOptions) -> np.ndarray:
    out = np.empty(len(batch))
    for start in range(0, len(batch), options.chunk):
        sl = slice(start, start + options.chunk)
        dirs, qw = quadrature_nodes(batch.rotations[sl], batch.alphas[sl], options.quadrature_nodes)
        ci = np.maximum(np.einsum("bkqi,bi->bkq", dirs, wi[sl]), 0.0)
        co = np.maximum(np.einsum("bkqi,bi->bkq", dirs, wo[sl]), 0.0)
        per_lobe = np.sum(qw * ci * co, axis=-1)
        out[sl] = 2.0 * np.sum(batch.weights[sl] * per_lobe, axis=-1)
    return out


def _diffuse_sg(batch: AbsdfBatch, h, length, valid, tables: PrecompTables) -> np.ndarray:
    lobe = fit_clamped_cosine_sg()
    k0 = lobe.kappa
    kappa = k0 * length
    c = lobe.amplitude ** 2 * np.exp(kappa - 2.0 * k0)
    alpha = tables.sg_convolved_alpha(batch.alphas, kappa[:, None])
    pdf = sggx_pdf_batched(batch.rotations, alpha, h[:, None, :])
    conv = np.sum(batch.weights * pdf, axis=-1)
    smooth = c * sg_kernel_integral(kappa) * conv
    return 2.0 * np.where(valid, smooth, c)


def _specular_distribution(batch: AbsdfBatch, wi, wo, h) -> np.ndarray:
    rot = batch.rotations[:, :, None]
    pdf = sggx_pdf_batched(rot, batch.spec_alpha, h[:, None, None, :])
    g = sggx_smith_g_batched(rot, batch.spec_alpha, wi[:, None, None, :], wo[:, None, None, :])
    b, k = batch.weights.shape
    active = batch.spec_weight > 0.0
    shape = np.zeros((b, k, 2))
    if np.any(active):
        bi = np.nonzero(active)[0]
        shape[active] = shape_term_scaled(wi[bi], wo[bi], batch.shape_scale[active])
    terms = batch.spec_weight * batch.micro_norm[:, None, :] * pdf * shape * g
    return 2.0 * np.sum(terms, axis=(1, 2))


def eval_unnormalized_batch(
    batch: AbsdfBatch,
    wi: np.ndarray,
    wo: np.ndarray,
    tables: PrecompTables,
    options: AbsdfOptions | None = None,
) -> np.ndarray:
    """(B, 3) values of |A| times the orientation-integrated base material."""
    options = options or AbsdfOptions()
    if not batch.prepared:
        batch = prepare_batch(batch, tables)
    wi = normalize(wi)
    wo = normalize(wo)
    h, length, valid = _half_vectors(wi, wo)

    fallback = batch.global_dir_values()
    diff_m = _query_cells(batch.dir_values[:, DIFFUSE_KERNEL], batch.dir_mass[:, DIFFUSE_KERNEL], fallback, h)
    spec_m = _query_cells(batch.dir_values[:, SPECULAR_KERNEL], batch.dir_mass[:, SPECULAR_KERNEL], fallback, h)
    diff_m = np.where(valid[:, None], diff_m, fallback)

    if options.diffuse_mode == "sg":
        orient = _diffuse_sg(batch, h, length, valid, tables)
    else:
        orient = _diffuse_quadrature(batch, wi, wo, options)
    diffuse = (diff_m[:, 0:3] - diff_m[:, 3:6]) / np.pi * orient[:, None]

    reflectance = spec_m[:, 3:6] + spec_m[:, 6:7] - spec_m[:, 7:8]
    fc = ((1.0 - np.clip(np.abs(np.sum(h * wo, axis=-1)), 0.0, 1.0)) ** 5)[:, None]
    d_spec = np.where(valid, _specular_distribution(batch, wi, wo, h), 0.0)
    specular = 0.25 * ((1.0 - fc) * reflectance + fc) * d_spec[:, None]

    return np.maximum(batch.area[:, None] * (diffuse + specular), 0.0)


def _as_batch(f: FactoredAbsdf, count: int, tables: PrecompTables) -> AbsdfBatch:
    return prepare_batch(AbsdfBatch.from_absdfs([f]), tables).take(np.zeros(count, dtype=np.int64))


def eval_unnormalized(f: FactoredAbsdf, wi, wo, tables: PrecompTables, options: AbsdfOptions | None = None) -> np.ndarray:
    """Single-voxel evaluation for one (3,) or many (N, 3) direction pairs."""
    single = np.ndim(wi) == 1 and np.ndim(wo) == 1
    wi2, wo2 = np.broadcast_arrays(np.atleast_2d(wi), np.atleast_2d(wo))
    out = eval_unnormalized_batch(_as_batch(f, len(wi2), tables), wi2, wo2, tables, options)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def _pick(cdf_weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(cdf_weights, axis=-1)
    cdf = cdf / np.maximum(cdf[:, -1:], 1e-300)
    return np.minimum(np.sum(cdf < u[:, None], axis=-1), cdf_weights.shape[-1] - 1)


def pdf_batch(batch: AbsdfBatch, wi: np.ndarray, wo: np.ndarray, tables: PrecompTables) -> np.ndarray:
    """Solid-angle pdf of ``sample_batch``: half the specular and half the diffuse half-vector mixture."""
    if not batch.prepared:
        batch = prepare_batch(batch, tables)
    wi = normalize(wi)
    wo = normalize(wo)
    h, _, valid = _half_vectors(wi, wo)
    cos = np.abs(np.sum(h * wo, axis=-1))
    spec = np.sum(batch.spec_weight * sggx_pdf_batched(batch.rotations[:, :, None], batch.spec_alpha, h[:, None, None, :]), axis=(1, 2))
    diff = np.sum(batch.weights * sggx_pdf_batched(batch.rotations, batch.diffuse_alpha, h[:, None, :]), axis=-1)
    # h and -h reflect to the same wi
    pdf = 0.5 * (spec + diff) * 2.0 / (4.0 * np.maximum(cos, HALF_VECTOR_EPS))
    return np.where(valid & (cos >= HALF_VECTOR_EPS), pdf, 0.0)


def sample_batch(batch: AbsdfBatch, wo: np.ndarray, rng, tables: PrecompTables, options: AbsdfOptions | None = None):
    """
    Picks the specular or diffuse component uniformly, a convolved lobe by
    weight, samples a half vector from it and reflects wo. Invalid half
    vectors are redrawn up to MAX_RESAMPLE times; after that the sample has
    zero pdf and value. Returns (wi, pdf, value).
    """
    if not batch.prepared:
        batch = prepare_batch(batch, tables)
    wo = normalize(wo)
    b, k = batch.weights.shape
    idx = np.arange(b)
    wi = -wo.copy()
    done = np.zeros(b, dtype=bool)

    for _ in range(MAX_RESAMPLE):
        u = rng.random((b, 2))
        spec_pick = _pick(batch.spec_weight.reshape(b, 2 * k), u[:, 1])
        diff_pick = _pick(batch.weights, u[:, 1])
        use_spec = u[:, 0] < 0.5
        rot = np.where(use_spec[:, None, None], batch.rotations[idx, spec_pick // 2], batch.rotations[idx, diff_pick])
        alpha = np.where(
            use_spec[:, None],
            batch.spec_alpha[idx, spec_pick // 2, spec_pick % 2],
            batch.diffuse_alpha[idx, diff_pick],
        )
        h = sample_sggx_density(rot, alpha, rng)
        cos = np.sum(h * wo, axis=-1)
        candidate = normalize(2.0 * cos[:, None] * h - wo)
        accept = (np.abs(cos) >= HALF_VECTOR_EPS) & ~done
        wi[accept] = candidate[accept]
        done |= accept
        if done.all():
            break

    pdf = np.where(done, pdf_batch(batch, wi, wo, tables), 0.0)
    value = np.where(done[:, None], eval_unnormalized_batch(batch, wi, wo, tables, options), 0.0)
    return wi, pdf, value


def sample(f: FactoredAbsdf, wo, rng, tables: PrecompTables, n: int = 1, options: AbsdfOptions | None = None):
    wo2 = np.broadcast_to(np.atleast_2d(wo), (n, 3))
    return sample_batch(_as_batch(f, n, tables), wo2, rng, tables, options)


def pdf(f: FactoredAbsdf, wi, wo, tables: PrecompTables) -> np.ndarray:
    single = np.ndim(wi) == 1 and np.ndim(wo) == 1
    wi2, wo2 = np.broadcast_arrays(np.atleast_2d(wi), np.atleast_2d(wo))
    out = pdf_batch(_as_batch(f, len(wi2), tables), wi2, wo2, tables)
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# Surface samples, estimation and the brute-force oracle
# ---------------------------------------------------------------------------

VisibilityFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class SurfaceSamples:
    """Area-uniform samples of the surfaces inside a voxel."""

    positions: np.ndarray
    normals: np.ndarray
    params: DisneyParams
    area: float
    visibility: Optional[VisibilityFn] = None

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class OracleEstimate:
    value: np.ndarray
    stderr: np.ndarray
    projected_area: float
    samples: int

    def normalized(self) -> np.ndarray:
        if self.projected_area <= 0.0:
            raise UndefinedProjectionError("Projected area toward wo is zero; the ABSDF is undefined")
        return self.value / self.projected_area


def brute_force_absdf(samples: SurfaceSamples, wi: np.ndarray, wo: np.ndarray, use_visibility: bool = False) -> OracleEstimate:
    """
    Monte Carlo estimate of the area integral of f <n.wi> <n.wo> (times
    V(x, wi) V(x, wo) when ``use_visibility``), with its projected area.
    """
    n = len(samples)
    if n < 2:
        raise ValueError("brute_force_absdf needs at least two samples")
    wi = normalize(np.asarray(wi, dtype=np.float64))
    wo = normalize(np.asarray(wo, dtype=np.float64))
    wi_b = np.broadcast_to(wi, (n, 3))
    wo_b = np.broadcast_to(wo, (n, 3))

    f = disney_eval(samples.params, samples.normals, wi_b, wo_b)
    cos_i = np.abs(samples.normals @ wi)
    cos_o = np.abs(samples.normals @ wo)
    g = f * (cos_i * cos_o)[:, None]
    vis_o = np.ones(n)
    if use_visibility and samples.visibility is not None:
        vis_i = samples.visibility(samples.positions, samples.normals, wi).astype(np.float64)
        vis_o = samples.visibility(samples.positions, samples.normals, wo).astype(np.float64)
        g = g * (vis_i * vis_o)[:, None]

    return OracleEstimate(
        value=samples.area * g.mean(axis=0),
        stderr=samples.area * g.std(axis=0, ddof=1) / np.sqrt(n),
        projected_area=float(samples.area * np.mean(cos_o * vis_o)),
        samples=n,
    )


def estimate_absdf(samples: SurfaceSamples, max_lobes: int = MAX_LOBES, splat_points: int = 16, seed: int = 0) -> FactoredAbsdf:
    """Fits the factored statistics of a voxel from its surface samples."""
    if len(samples) == 0:
        raise ValueError("estimate_absdf: no surface samples")
    ndf = fit_ndf_mixture(samples.normals, max_lobes, seed)
    moments = MomentSet.from_params(samples.params)
    mean = float(np.clip(moments.roughness, ALPHA_MIN, 1.0 - ALPHA_MIN))
    beta = beta_from_moments(mean, moments.roughness_variance)
    dir_moments = splat_directional_moments(
        samples.normals,
        samples.params.roughness,
        directional_channels(samples.params),
        splat_points,
        seed,
    )
    logging.debug(f"ABSDF estimate: {ndf.k} lobe(s), beta=({beta.a:.3g}, {beta.b:.3g}), area={samples.area:.4g}")
    return FactoredAbsdf(ndf, beta, moments, dir_moments, samples.area)
