"""
Scene-independent precomputed tables.

    M1 sg_conv     (ax, ay, kappa)  -> (dax, day)   SGGX convolved with an SG kernel
    M2 beta_lobes  (a, b)           -> (m1, a1, a2) two-lobe fit of a beta roughness mixture
    M3 ggx_conv    (ax, ay, alpha)  -> (dax, day)   SGGX convolved with a GGX kernel
    M4 ltc_inv     alpha            -> 3x3          inverse LTC of the projected GGX D cos(theta)
    M5 ggx_norm    alpha            -> scalar       hemisphere integral of GGX D, in [1, 2]

Convolution ground truth is a two-strategy Monte Carlo estimate (kernel
samples and lobe samples, balance heuristic). Every node fit is a damped
least-squares solve retried from jittered starts, then a grid search; the
fit report records residuals and every flagged node.
"""

import io
import logging
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import BinaryIO, Optional

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import least_squares
from scipy.special import expit, logit
from scipy.stats import beta as beta_dist
from tenacity import retry, retry_if_exception_type, stop_after_attempt

from src.core.sggx import (
    ALPHA_MIN,
    ggx_hemisphere_integral,
    quadrature_nodes,
    sample_sggx_density,
    sggx_density,
    sggx_pdf_batched,
)
from src.core.spherical import (
    KAPPA_RANGE,
    build_frames,
    fibonacci_sphere,
    frames_to_local,
    frames_to_world,
    sg_kernel_integral,
)
from src.utils.binio import ChunkFormatError, pack_arrays, pack_json, read_chunk, unpack_arrays, unpack_json, write_chunk
from src.utils.config import TableFitSettings
from src.utils.parallel import run_tasks
from src.utils.security import safe_write_bytes

MAGIC = b"ABT1"
FORMAT_VERSION = 1
BETA_RANGE = (0.1, 100.0)
BETA_CONCENTRATION_CAP = 1.0e4
LTC_FLAG_RESIDUAL = 0.05
LTC_ISOTROPY_TOL = 0.02

TABLE_TAGS = {
    "sg_conv": b"SGCV",
    "beta_lobes": b"BETA",
    "ggx_conv": b"GGCV",
    "ltc_inv": b"LTCI",
    "ggx_norm": b"GNRM",
}


class TableFormatError(Exception):
    """Raised when a table file is missing, corrupt or incomplete."""


class FitDivergedError(Exception):
    """Raised when a node's least-squares solve fails to converge."""


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


def alpha_axis(n: int) -> np.ndarray:
    """Roughness nodes in [ALPHA_MIN, 1], spaced uniformly in sqrt(alpha)."""
    t = np.linspace(np.sqrt(ALPHA_MIN), 1.0, n)
    axis = t * t
    axis[0], axis[-1] = ALPHA_MIN, 1.0
    return axis


def kappa_axis(n: int) -> np.ndarray:
    return np.linspace(KAPPA_RANGE[0], KAPPA_RANGE[1], n)


def beta_axis(n: int) -> np.ndarray:
    return np.geomspace(BETA_RANGE[0], BETA_RANGE[1], n)


@dataclass(frozen=True)
class TableGrid:
    """Node values on a rectilinear grid; the last axis of ``values`` is channels."""

    name: str
    axes: tuple
    values: np.ndarray
    log_axes: tuple = ()
    residual: Optional[np.ndarray] = None

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=np.float64) for a in self.axes)
        values = np.asarray(self.values, dtype=np.float32)
        if values.shape[:-1] != tuple(len(a) for a in axes):
            raise ValueError(f"Table {self.name}: values {values.shape} do not match axes")
        log_axes = tuple(self.log_axes) or (False,) * len(axes)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "log_axes", tuple(bool(v) for v in log_axes))

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    @cached_property
    def _interpolator(self) -> RegularGridInterpolator:
        points = tuple(np.log(a) if log else a for a, log in zip(self.axes, self.log_axes))
        return RegularGridInterpolator(points, self.values, method="linear", bounds_error=False, fill_value=None)

    def _transform(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.float64)
        out = np.empty_like(coords)
        for d, (axis, log) in enumerate(zip(self.axes, self.log_axes)):
            c = np.clip(coords[..., d], axis[0], axis[-1])
            out[..., d] = np.log(c) if log else c
        return out

    def query(self, coords: np.ndarray) -> np.ndarray:
        """Multilinear interpolation; coordinates are clamped into the grid."""
        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape[-1] != len(self.axes):
            raise ValueError(f"Table {self.name} expects {len(self.axes)} coordinates")
        flat = self._transform(coords).reshape(-1, len(self.axes))
        return self._interpolator(flat).reshape(coords.shape[:-1] + (self.channels,))


def query(table: TableGrid, coords: np.ndarray) -> np.ndarray:
    return table.query(coords)


@dataclass(frozen=True)
class PrecompTables:
    sg_conv: TableGrid
    beta_lobes: TableGrid
    ggx_conv: TableGrid
    ltc_inv: TableGrid
    ggx_norm: TableGrid
    report: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def grids(self) -> dict[str, TableGrid]:
        return {name: getattr(self, name) for name in TABLE_TAGS}

    def sg_convolved_alpha(self, alpha: np.ndarray, kappa) -> np.ndarray:
        """M1: roughness of the SGGX lobe after convolution with an SG of sharpness kappa."""
        alpha = np.asarray(alpha, dtype=np.float64)
        kappa = np.broadcast_to(np.asarray(kappa, dtype=np.float64), alpha.shape[:-1])
        coords = np.concatenate([alpha, kappa[..., None]], axis=-1)
        return np.clip(alpha + self.sg_conv.query(coords), ALPHA_MIN, 1.0)

    def ggx_convolved_alpha(self, alpha: np.ndarray, kernel_alpha) -> np.ndarray:
        """M3: roughness of the SGGX lobe after convolution with a GGX kernel."""
        alpha = np.asarray(alpha, dtype=np.float64)
        kernel_alpha = np.broadcast_to(np.asarray(kernel_alpha, dtype=np.float64), alpha.shape[:-1])
        coords = np.concatenate([alpha, kernel_alpha[..., None]], axis=-1)
        return np.clip(alpha + self.ggx_conv.query(coords), ALPHA_MIN, 1.0)

    def beta_two_lobes(self, a, b):
        """M2: (m1, alpha1, alpha2); concentrated distributions bypass the grid."""
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        fitted = self.beta_lobes.query(np.stack(np.broadcast_arrays(a, b), axis=-1))
        m1, a1, a2 = (fitted[..., i] for i in range(3))
        mean = np.clip(a / (a + b), ALPHA_MIN, 1.0)
        concentrated = (a + b) > 2.0 * BETA_RANGE[1]
        m1 = np.clip(np.where(concentrated, 1.0, m1), 0.0, 1.0)
        a1 = np.clip(np.where(concentrated, mean, a1), ALPHA_MIN, 1.0)
        a2 = np.clip(np.where(concentrated, mean, a2), ALPHA_MIN, 1.0)
        return m1, a1, a2

    def ltc_inverse(self, alpha) -> np.ndarray:
        """M4: (..., 3, 3) inverse LTC matrices."""
        alpha = np.asarray(alpha, dtype=np.float64)
        return self.ltc_inv.query(alpha[..., None]).reshape(alpha.shape + (3, 3))

    def ltc_scale(self, alpha) -> np.ndarray:
        """Tangential scale a of the forward LTC, 1 / sqrt(m00 m11) of the fitted inverse."""
        inv = self.ltc_inverse(alpha)
        return 1.0 / np.sqrt(np.maximum(inv[..., 0, 0] * inv[..., 1, 1], 1e-24))

    def ggx_norm_value(self, alpha) -> np.ndarray:
        """M5: hemisphere integral of GGX D; the double-sided sphere value is twice this."""
        alpha = np.asarray(alpha, dtype=np.float64)
        return self.ggx_norm.query(alpha[..., None])[..., 0]


# ---------------------------------------------------------------------------
# Beta roughness distribution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BetaParams:
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0.0 and self.b > 0.0):
            raise ValueError(f"BetaParams needs a > 0 and b > 0, got ({self.a}, {self.b})")

    @property
    def mean(self) -> float:
        return self.a / (self.a + self.b)

    @property
    def variance(self) -> float:
        s = self.a + self.b
        return self.a * self.b / (s * s * (s + 1.0))

    @property
    def concentration(self) -> float:
        return self.a + self.b

    def ppf(self, q: np.ndarray) -> np.ndarray:
        return beta_dist.ppf(q, self.a, self.b)


def beta_from_moments(mean: float, variance: float) -> BetaParams:
    """
    Method-of-moments beta fit. Variances at or above mu(1 - mu) are clamped
    to 0.999 mu(1 - mu); variances below that of the concentration cap
    return a + b = 1e4 at the mean.
    """
    mu = float(mean)
    var = float(variance)
    if not 0.0 < mu < 1.0:
        raise ValueError(f"beta_from_moments: mean {mu} outside (0, 1)")
    limit = mu * (1.0 - mu)
    if var >= limit:
        var = 0.999 * limit
    if var <= limit / (BETA_CONCENTRATION_CAP + 1.0):
        return BetaParams(mu * BETA_CONCENTRATION_CAP, (1.0 - mu) * BETA_CONCENTRATION_CAP)
    nu = limit / var - 1.0
    return BetaParams(mu * nu, (1.0 - mu) * nu)


# ---------------------------------------------------------------------------
# Shared numerics
# ---------------------------------------------------------------------------


def _mu_quadrature(panel_nodes: int = 64):
    """
    Nodes in mu = cos(theta) in [0, 1] via mu = 1 - s^2 with geometric
    panels in s, so lobes down to alpha = 1e-3 are resolved.
    """
    x, w = np.polynomial.legendre.leggauss(panel_nodes)
    edges = [0.0, 1e-3, 1e-2, 1e-1, 1.0]
    s_all, w_all = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        s = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
        s_all.append(s)
        w_all.append(0.5 * (hi - lo) * w * 2.0 * s)
    s = np.concatenate(s_all)
    mu = 1.0 - s * s
    weights = np.concatenate(w_all) * 2.0 * np.pi
    return mu, weights


def iso_density(mu: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Raw isotropic GGX density at cos(theta) = mu."""
    a2 = alpha * alpha
    q = mu * mu + (1.0 - mu * mu) / a2
    return 1.0 / (np.pi * a2 * q * q)


def iso_pdf(mu: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Double-sided normalized density of an isotropic lobe."""
    return iso_density(mu, alpha) / (2.0 * ggx_hemisphere_integral(alpha))


def fit_directions(alpha_guess: np.ndarray, count: int):
    """
    Evaluation directions on the upper hemisphere for convolution fits:
    half Fibonacci, half stretched quadrature nodes of a guess lobe. Returns
    directions and quadrature weights for L2 over the hemisphere.
    """
    half = max(count // 2, 8)
    sphere = fibonacci_sphere(2 * half)
    uniform = sphere[sphere[:, 2] > 0.0]
    guess = np.clip(np.asarray(alpha_guess, dtype=np.float64), ALPHA_MIN, 1.0)
    lobe_dirs, _ = quadrature_nodes(np.eye(3), guess, 2 * half)
    lobe_dirs = lobe_dirs[lobe_dirs[:, 2] > 0.0][:half]
    directions = np.concatenate([uniform, lobe_dirs])
    q_uniform = 1.0 / (2.0 * np.pi)
    q_lobe = 2.0 * sggx_pdf_batched(np.eye(3), guess, directions)
    weights = 1.0 / (len(directions) * (0.5 * q_uniform + 0.5 * q_lobe))
    return directions, weights


class _SgKernel:
    def __init__(self, kappa: float):
        self.kappa = float(kappa)
        self.norm = float(sg_kernel_integral(self.kappa))

    def pdf(self, centers: np.ndarray, w: np.ndarray) -> np.ndarray:
        """centers (J, 3), w (J, N, 3) or (N, 3) -> (J, N)."""
        if w.ndim == 2:
            cos = centers @ w.T
        else:
            cos = np.einsum("ji,jni->jn", centers, w)
        return np.exp(self.kappa * (cos - 1.0)) / self.norm

    def sample(self, centers: np.ndarray, n: int, rng) -> np.ndarray:
        j = len(centers)
        u = rng.random((j, n, 2))
        k = self.kappa
        mu = 1.0 + np.log(u[..., 0] + (1.0 - u[..., 0]) * np.exp(-2.0 * k)) / k
        mu = np.clip(mu, -1.0, 1.0)
        r = np.sqrt(np.maximum(1.0 - mu * mu, 0.0))
        phi = 2.0 * np.pi * u[..., 1]
        local = np.stack([r * np.cos(phi), r * np.sin(phi), mu], axis=-1)
        return frames_to_world(build_frames(centers)[:, None], local)


class _GgxKernel:
    """Single-sided GGX perturbation of the normal, as a solid-angle pdf."""

    def __init__(self, alpha: float):
        self.alpha = float(alpha)
        self.norm = float(ggx_hemisphere_integral(self.alpha))
        self.alpha2 = np.array([self.alpha, self.alpha])

    def pdf(self, centers: np.ndarray, w: np.ndarray) -> np.ndarray:
        frames = build_frames(centers)[:, None]
        if w.ndim == 2:
            w = np.broadcast_to(w[None], (len(centers),) + w.shape)
        local = frames_to_local(frames, w)
        density = sggx_density(np.eye(3), self.alpha2, local) / self.norm
        return np.where(local[..., 2] > 0.0, density, 0.0)

    def sample(self, centers: np.ndarray, n: int, rng) -> np.ndarray:
        j = len(centers)
        alpha = np.broadcast_to(self.alpha2, (j * n, 2))
        local = sample_sggx_density(np.broadcast_to(np.eye(3), (j * n, 3, 3)), alpha, rng).reshape(j, n, 3)
        local[..., 2] = np.abs(local[..., 2])
        return frames_to_world(build_frames(centers)[:, None], local)


def _convolution_reference(alpha: np.ndarray, kernel, directions: np.ndarray, samples: int, rng, chunk: int = 16):
    """Balance-heuristic estimate of (D * kernel)(w_j) for a lobe in the canonical frame."""
    alpha = np.asarray(alpha, dtype=np.float64)
    identity = np.eye(3)
    lobe_samples = sample_sggx_density(np.broadcast_to(identity, (samples, 3, 3)), np.broadcast_to(alpha, (samples, 2)), rng)
    lobe_pdf = sggx_pdf_batched(identity, alpha, lobe_samples)

    out = np.empty(len(directions))
    for start in range(0, len(directions), chunk):
        centers = directions[start:start + chunk]
        k_on_lobe = kernel.pdf(centers, lobe_samples)
        term_a = lobe_pdf[None] * k_on_lobe / (lobe_pdf[None] + k_on_lobe)

        kernel_samples = kernel.sample(centers, samples, rng)
        d_on_kernel = sggx_pdf_batched(identity, alpha, kernel_samples)
        k_self = kernel.pdf(centers, kernel_samples)
        denom = d_on_kernel + k_self
        term_b = np.where(denom > 0.0, d_on_kernel * k_self / np.maximum(denom, 1e-300), 0.0)

        out[start:start + chunk] = (term_a.sum(axis=1) + term_b.sum(axis=1)) / samples
    return out


def sg_convolution_reference(alpha, kappa: float, directions: np.ndarray, samples: int, seed: int = 0) -> np.ndarray:
    """Monte Carlo SGGX-SG convolution at the given directions (canonical lobe frame)."""
    return _convolution_reference(alpha, _SgKernel(kappa), directions, samples, np.random.default_rng(seed))


def ggx_convolution_reference(alpha, kernel_alpha: float, directions: np.ndarray, samples: int, seed: int = 0) -> np.ndarray:
    """Monte Carlo SGGX-GGX convolution at the given directions (canonical lobe frame)."""
    return _convolution_reference(alpha, _GgxKernel(kernel_alpha), directions, samples, np.random.default_rng(seed))


def relative_error(model: np.ndarray, target: np.ndarray, weights: np.ndarray) -> float:
    denom = np.sqrt(np.sum(weights * target * target))
    return float(np.sqrt(np.sum(weights * (model - target) ** 2)) / max(denom, 1e-300))


class _NodeSolver:
    """Least-squares solve with jittered restarts on divergence."""

    def __init__(self, residual, x0, seed):
        self.residual = residual
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.rng = np.random.default_rng(seed)
        self.attempts = 0

    @retry(stop=stop_after_attempt(3), retry=retry_if_exception_type(FitDivergedError), reraise=True)
    def solve(self) -> np.ndarray:
        x0 = self.x0 if self.attempts == 0 else self.x0 + self.rng.normal(0.0, 0.5, self.x0.shape)
        self.attempts += 1
        try:
            result = least_squares(self.residual, x0, method="lm")
        except (ValueError, np.linalg.LinAlgError) as e:
            raise FitDivergedError(str(e))
        if result.status <= 0 or not np.all(np.isfinite(result.x)) or not np.isfinite(result.cost):
            raise FitDivergedError(result.message)
        return result.x


def _solve_with_fallback(residual, x0, seed, grid: list[np.ndarray]):
    """Returns (params, used_fallback)."""
    try:
        return _NodeSolver(residual, x0, seed).solve(), False
    except FitDivergedError as e:
        logging.debug(f"Node fit diverged after retries ({e}); grid search")
    best, best_cost = None, np.inf
    for candidate in grid:
        cost = float(np.sum(residual(candidate) ** 2))
        if cost < best_cost:
            best, best_cost = candidate, cost
    return best, True


# ---------------------------------------------------------------------------
# M1 / M3: convolution tables
# ---------------------------------------------------------------------------


def _conv_guess(alpha: np.ndarray, kind: str, g: float) -> np.ndarray:
    width2 = 1.0 / g if kind == "sg" else g * g
    return np.minimum(np.sqrt(alpha * alpha + width2), 1.0)


def _fit_conv_node(task: tuple) -> tuple:
    """Fits one (ax, ay, g) node. Runs in worker processes."""
    index, kind, ax, ay, g, samples, direction_count, seed = task
    alpha = np.array([ax, ay])
    headroom = 1.0 - alpha
    if np.all(headroom < 1e-9):
        return index, np.zeros(2), 0.0, False

    guess = _conv_guess(alpha, kind, g)
    directions, weights = fit_directions(guess, direction_count)
    kernel = _SgKernel(g) if kind == "sg" else _GgxKernel(g)
    rng = np.random.default_rng(np.random.SeedSequence(list(seed)))
    target = _convolution_reference(alpha, kernel, directions, samples, rng)
    sqrt_w = np.sqrt(weights)
    scale = 1.0 / max(np.sqrt(np.sum(weights * target * target)), 1e-300)

    def delta(p):
        return np.where(headroom > 1e-9, headroom * expit(p), 0.0)

    def residual(p):
        model = sggx_pdf_batched(np.eye(3), alpha + delta(p), directions)
        return sqrt_w * (model - target) * scale

    frac0 = np.clip((guess - alpha) / np.maximum(headroom, 1e-9), 1e-3, 1.0 - 1e-3)
    grid_fracs = np.linspace(0.02, 0.98, 17)
    grid = [logit(np.array([fx, fy])) for fx in grid_fracs for fy in grid_fracs]
    params, fallback = _solve_with_fallback(residual, logit(frac0), list(seed) + [1], grid)
    err = float(np.sqrt(np.sum(residual(params) ** 2)))
    return index, delta(params), err, fallback


def _fit_conv_table(kind: str, alphas: np.ndarray, kernel_axis: np.ndarray, settings: TableFitSettings):
    n, m = len(alphas), len(kernel_axis)
    table_id = 1 if kind == "sg" else 3
    tasks = []
    for i in range(n):
        for j in range(i, n):
            for k in range(m):
                seed = (settings.seed, table_id, i, j, k)
                tasks.append(((i, j, k), kind, alphas[i], alphas[j], kernel_axis[k], settings.mc_samples, settings.directions, seed))

    values = np.zeros((n, n, m, 2))
    residual = np.zeros((n, n, m))
    fallback = np.zeros((n, n, m), dtype=bool)
    for (i, j, k), d, err, used_fallback in run_tasks(_fit_conv_node, tasks, settings.workers, f"M{table_id}", chunksize=4):
        values[i, j, k] = d
        values[j, i, k] = d[::-1]
        residual[i, j, k] = residual[j, i, k] = err
        fallback[i, j, k] = fallback[j, i, k] = used_fallback
    return values, residual, fallback


def _enforce_monotone(values: np.ndarray, axis: int, increasing_with_index: bool) -> int:
    """Makes values nondecreasing along the kernel-width direction; returns fixes."""
    moved = np.moveaxis(values, axis, 0)
    ordered = moved if increasing_with_index else moved[::-1]
    fixed = np.maximum.accumulate(ordered, axis=0)
    changes = int(np.count_nonzero(fixed > ordered + 1e-9))
    ordered[...] = fixed
    return changes


def _node_report(name: str, residual: np.ndarray, fallback: np.ndarray, coords_fn, extra_flags=None) -> dict:
    median = float(np.median(residual))
    flags = []
    high = residual > 2.0 * max(median, 1e-12)
    high_extra = np.zeros_like(high) if extra_flags is None else extra_flags
    for idx in zip(*np.nonzero(high | fallback | high_extra)):
        reasons = []
        if fallback[idx]:
            reasons.append("fallback")
        if high[idx]:
            reasons.append("residual>2x_median")
        if high_extra[idx]:
            reasons.append("residual_above_limit")
        flags.append({"node": [int(i) for i in idx], "coords": coords_fn(idx), "residual": float(residual[idx]), "reasons": reasons})
    if flags:
        logging.warning(f"Table {name}: {len(flags)} node(s) flagged")
    return {
        "median_residual": median,
        "max_residual": float(np.max(residual)),
        "nodes": int(residual.size),
        "flagged": flags,
    }


def fit_sg_conv_table(settings: TableFitSettings | None = None) -> tuple[TableGrid, dict]:
    """M1 over (ax, ay, kappa)."""
    settings = settings or TableFitSettings()
    alphas = alpha_axis(settings.sg_grid)
    kappas = kappa_axis(settings.sg_grid)
    logging.info(f"Fitting M1 (SGGX x SG) on {settings.sg_grid}^3 nodes")
    values, residual, fallback = _fit_conv_table("sg", alphas, kappas, settings)
    # Kernel width grows as kappa decreases
    fixes = _enforce_monotone(values, axis=2, increasing_with_index=False)
    report = _node_report("sg_conv", residual, fallback, lambda idx: [alphas[idx[0]], alphas[idx[1]], kappas[idx[2]]])
    report["monotone_fixes"] = fixes
    return TableGrid("sg_conv", (alphas, alphas, kappas), values, residual=residual), report


def fit_ggx_conv_table(settings: TableFitSettings | None = None) -> tuple[TableGrid, dict]:
    """M3 over (ax, ay, kernel alpha)."""
    settings = settings or TableFitSettings()
    alphas = alpha_axis(settings.ggx_grid)
    logging.info(f"Fitting M3 (SGGX x GGX) on {settings.ggx_grid}^3 nodes")
    values, residual, fallback = _fit_conv_table("ggx", alphas, alphas, settings)
    fixes = _enforce_monotone(values, axis=2, increasing_with_index=True)
    report = _node_report("ggx_conv", residual, fallback, lambda idx: [alphas[idx[0]], alphas[idx[1]], alphas[idx[2]]])
    report["monotone_fixes"] = fixes
    return TableGrid("ggx_conv", (alphas, alphas, alphas), values, residual=residual), report


# ---------------------------------------------------------------------------
# M2: two-lobe fit of a beta roughness mixture
# ---------------------------------------------------------------------------


def beta_mixture_density(params: BetaParams, mu: np.ndarray, quadrature: int = 256) -> np.ndarray:
    """Normalized isotropic density averaged over beta-distributed roughness."""
    q = (np.arange(quadrature) + 0.5) / quadrature
    alphas = np.clip(params.ppf(q), ALPHA_MIN, 1.0)
    return np.mean(iso_pdf(mu[None, :], alphas[:, None]), axis=0)


def two_lobe_density(mu: np.ndarray, m1, alpha1, alpha2) -> np.ndarray:
    return m1 * iso_pdf(mu, alpha1) + (1.0 - m1) * iso_pdf(mu, alpha2)


def _unpack_beta_params(p):
    return expit(p[0]), ALPHA_MIN + (1.0 - ALPHA_MIN) * expit(p[1]), ALPHA_MIN + (1.0 - ALPHA_MIN) * expit(p[2])


def _alpha_logit(alpha: float) -> float:
    frac = np.clip((alpha - ALPHA_MIN) / (1.0 - ALPHA_MIN), 1e-4, 1.0 - 1e-4)
    return float(logit(frac))


def _fit_beta_node(task: tuple) -> tuple:
    index, a, b, quadrature, seed = task
    params = BetaParams(a, b)
    mean = float(np.clip(params.mean, ALPHA_MIN, 1.0))
    if params.concentration > 2.0 * BETA_RANGE[1]:
        return index, np.array([1.0, mean, mean]), 0.0, False, False

    mu, weights = _mu_quadrature()
    target = beta_mixture_density(params, mu, quadrature)
    sqrt_w = np.sqrt(weights)
    scale = 1.0 / max(np.sqrt(np.sum(weights * target * target)), 1e-300)

    def residual(p):
        m1, a1, a2 = _unpack_beta_params(p)
        return sqrt_w * (two_lobe_density(mu, m1, a1, a2) - target) * scale

    x0 = np.array([0.0, _alpha_logit(float(params.ppf(0.25))), _alpha_logit(float(params.ppf(0.75)))])
    grid_alphas = alpha_axis(9)
    grid = [np.array([logit(m), _alpha_logit(p1), _alpha_logit(p2)])
            for m in (0.25, 0.5, 0.75) for p1 in grid_alphas for p2 in grid_alphas if p1 <= p2]
    p, fallback = _solve_with_fallback(residual, x0, list(seed), grid)
    m1, a1, a2 = _unpack_beta_params(p)
    if a1 > a2:
        m1, a1, a2 = 1.0 - m1, a2, a1
    two_err = float(np.sqrt(np.sum(residual(p) ** 2)))

    single = sqrt_w * (iso_pdf(mu, mean) - target) * scale
    single_err = float(np.sqrt(np.sum(single ** 2)))
    if single_err <= two_err:
        logging.debug(f"M2 node {index}: two-lobe fit ({two_err:.3g}) no better than one lobe at the mean ({single_err:.3g})")
        return index, np.array([1.0, mean, mean]), single_err, fallback, True
    return index, np.array([m1, a1, a2]), two_err, fallback, False


def fit_beta_lobe_table(settings: TableFitSettings | None = None) -> tuple[TableGrid, dict]:
    """M2 over log-spaced (a, b)."""
    settings = settings or TableFitSettings()
    axis = beta_axis(settings.beta_grid)
    n = len(axis)
    logging.info(f"Fitting M2 (beta two-lobe) on {n}x{n} nodes")
    tasks = [((i, j), axis[i], axis[j], settings.beta_quadrature, (settings.seed, 2, i, j)) for i in range(n) for j in range(n)]
    values = np.zeros((n, n, 3))
    residual = np.zeros((n, n))
    fallback = np.zeros((n, n), dtype=bool)
    single = np.zeros((n, n), dtype=bool)
    for (i, j), v, err, used_fallback, single_lobe in run_tasks(_fit_beta_node, tasks, settings.workers, "M2", chunksize=4):
        values[i, j] = v
        residual[i, j] = err
        fallback[i, j] = used_fallback
        single[i, j] = single_lobe
    report = _node_report("beta_lobes", residual, fallback, lambda idx: [axis[idx[0]], axis[idx[1]]])
    report["single_lobe_nodes"] = int(np.count_nonzero(single))
    if report["single_lobe_nodes"]:
        logging.info(f"M2: {report['single_lobe_nodes']} of {n * n} node(s) kept a single lobe at the mean")
    return TableGrid("beta_lobes", (axis, axis), values, log_axes=(True, True), residual=residual), report


# ---------------------------------------------------------------------------
# M4 / M5
# ---------------------------------------------------------------------------


def ltc_inverse_from_params(p) -> np.ndarray:
    """Inverse LTC [[m00, 0, m02], [0, m11, 0], [0, 0, 1]] from (log m00, log m11, m02)."""
    inv = np.eye(3)
    inv[0, 0] = np.exp(p[0])
    inv[1, 1] = np.exp(p[1])
    inv[0, 2] = p[2]
    return inv


def ltc_density(directions: np.ndarray, inverse: np.ndarray) -> np.ndarray:
    """Clamped cosine transformed by the LTC with the given inverse, at unit directions (..., 3)."""
    local = np.asarray(directions, dtype=np.float64) @ np.asarray(inverse, dtype=np.float64).T
    length = np.linalg.norm(local, axis=-1)
    cos = np.maximum(local[..., 2] / length, 0.0)
    return cos / np.pi * abs(np.linalg.det(inverse)) / length ** 3


def ggx_target_density(directions: np.ndarray, alpha: float) -> np.ndarray:
    """GGX D times cos(theta): the normalized distribution of projected microfacet normals."""
    mu = np.clip(np.asarray(directions, dtype=np.float64)[..., 2], 0.0, 1.0)
    return mu * iso_density(mu, alpha)


def _fit_ltc_node(task: tuple) -> tuple:
    index, alpha, count = task
    directions, weights = fit_directions(np.array([alpha, alpha]), count)
    target = ggx_target_density(directions, alpha)
    sqrt_w = np.sqrt(weights)
    scale = 1.0 / max(np.sqrt(np.sum(weights * target * target)), 1e-300)

    def residual(p):
        return sqrt_w * (ltc_density(directions, ltc_inverse_from_params(p)) - target) * scale

    x0 = np.array([-np.log(alpha), -np.log(alpha), 0.0])
    grid = [np.array([-np.log(a), -np.log(a), 0.0]) for a in np.geomspace(ALPHA_MIN, 2.0, 64)]
    p, fallback = _solve_with_fallback(residual, x0, [2, int(alpha * 1e6)], grid)
    return index, ltc_inverse_from_params(p), float(np.sqrt(np.sum(residual(p) ** 2))), fallback


def fit_ltc_table(settings: TableFitSettings | None = None) -> tuple[TableGrid, dict]:
    """M4: inverse LTC (m00, m11, m02 free) per alpha, stored as full 3x3 matrices."""
    settings = settings or TableFitSettings()
    alphas = alpha_axis(settings.ltc_nodes)
    logging.info(f"Fitting M4 (inverse LTC) on {len(alphas)} nodes")
    tasks = [(n, float(alpha), settings.directions) for n, alpha in enumerate(alphas)]
    values = np.zeros((len(alphas), 9))
    residual = np.zeros(len(alphas))
    fallback = np.zeros(len(alphas), dtype=bool)
    for n, inv, err, used_fallback in run_tasks(_fit_ltc_node, tasks, settings.workers, "M4", chunksize=4):
        values[n] = inv.reshape(9)
        residual[n] = err
        fallback[n] = used_fallback
    report = _node_report("ltc_inv", residual, fallback, lambda idx: [alphas[idx[0]]], extra_flags=residual > LTC_FLAG_RESIDUAL)
    return TableGrid("ltc_inv", (alphas,), values, residual=residual), report


def _ggx_norm_integral(alpha: float) -> float:
    value, _ = quad(lambda t: np.sqrt(1.0 + alpha * alpha * t) / (1.0 + t) ** 2, 0.0, np.inf, limit=200)
    return value


def fit_ggx_norm_table(settings: TableFitSettings | None = None) -> tuple[TableGrid, dict]:
    """M5: hemisphere integral of GGX D by adaptive quadrature."""
    settings = settings or TableFitSettings()
    alphas = alpha_axis(settings.norm_nodes)
    values = np.array([_ggx_norm_integral(float(a)) for a in alphas])
    residual = np.abs(values - ggx_hemisphere_integral(alphas))
    report = {"max_closed_form_deviation": float(np.max(residual)), "nodes": len(alphas), "flagged": []}
    return TableGrid("ggx_norm", (alphas,), values[:, None], residual=residual), report


# ---------------------------------------------------------------------------
# Build, check, persist
# ---------------------------------------------------------------------------


def build_tables(settings: TableFitSettings | None = None) -> PrecompTables:
    settings = settings or TableFitSettings()
    m1, r1 = fit_sg_conv_table(settings)
    m2, r2 = fit_beta_lobe_table(settings)
    m3, r3 = fit_ggx_conv_table(settings)
    m4, r4 = fit_ltc_table(settings)
    m5, r5 = fit_ggx_norm_table(settings)
    report = {"sg_conv": r1, "beta_lobes": r2, "ggx_conv": r3, "ltc_inv": r4, "ggx_norm": r5}
    logging.info("Precomputed tables complete")
    return PrecompTables(m1, m2, m3, m4, m5, report=report, settings=settings.model_dump())


def check_tables(tables: PrecompTables) -> list[str]:
    """Sanity invariants; returns human-readable problems (empty when healthy)."""
    problems = []
    for name in ("sg_conv", "ggx_conv"):
        values = getattr(tables, name).values
        if np.any(values < 0.0):
            problems.append(f"{name}: negative roughness increment")
        kernel_diff = np.diff(values, axis=2)
        if name == "sg_conv":
            kernel_diff = -kernel_diff
        if np.any(kernel_diff < -1e-6):
            problems.append(f"{name}: increment decreases with kernel width")
    lobes = tables.beta_lobes.values
    if np.any((lobes[..., 0] < 0.0) | (lobes[..., 0] > 1.0)):
        problems.append("beta_lobes: weight outside [0, 1]")
    if np.any((lobes[..., 1:] < ALPHA_MIN - 1e-7) | (lobes[..., 1:] > 1.0 + 1e-7)):
        problems.append("beta_lobes: roughness outside [alpha_min, 1]")
    norms = tables.ggx_norm.values
    if np.any((norms < 1.0 - 1e-5) | (norms > 2.0 + 1e-5)):
        problems.append("ggx_norm: value outside [1, 2]")
    inv = tables.ltc_inv.values.reshape(-1, 3, 3).astype(np.float64)
    if np.any(np.abs(np.linalg.det(inv)) < 1e-12):
        problems.append("ltc_inv: singular matrix")
    diag = np.maximum(inv[:, 0, 0], 1e-12)
    if np.any(np.abs(inv[:, 1, 1] / diag - 1.0) > LTC_ISOTROPY_TOL) or np.any(np.abs(inv[:, 0, 2]) / diag > LTC_ISOTROPY_TOL):
        problems.append("ltc_inv: fitted matrix is not isotropic")
    return problems


def serialize_tables(tables: PrecompTables, stream: BinaryIO) -> None:
    stream.write(MAGIC)
    header = {"version": FORMAT_VERSION, "tables": list(TABLE_TAGS), "settings": tables.settings}
    write_chunk(stream, b"HEAD", pack_json(header))
    for name, tag in TABLE_TAGS.items():
        grid = getattr(tables, name)
        arrays = {f"axis{d}": a for d, a in enumerate(grid.axes)}
        arrays["values"] = grid.values
        arrays["log_axes"] = np.array(grid.log_axes, dtype=np.uint8)
        if grid.residual is not None:
            arrays["residual"] = np.asarray(grid.residual, dtype=np.float32)
        write_chunk(stream, tag, pack_arrays(arrays))
    write_chunk(stream, b"RPRT", pack_json(tables.report))


def deserialize_tables(stream: BinaryIO) -> PrecompTables:
    if stream.read(4) != MAGIC:
        raise TableFormatError("Not a table file (bad magic)")
    grids: dict[str, TableGrid] = {}
    header, report = None, {}
    by_tag = {tag: name for name, tag in TABLE_TAGS.items()}
    try:
        while (chunk := read_chunk(stream)) is not None:
            tag, payload = chunk
            if tag == b"HEAD":
                header = unpack_json(payload)
            elif tag == b"RPRT":
                report = unpack_json(payload)
            elif tag in by_tag:
                arrays = unpack_arrays(payload)
                ndim = sum(1 for key in arrays if key.startswith("axis"))
                name = by_tag[tag]
                grids[name] = TableGrid(
                    name,
                    tuple(arrays[f"axis{d}"] for d in range(ndim)),
                    arrays["values"],
                    log_axes=tuple(bool(v) for v in arrays["log_axes"]),
                    residual=arrays.get("residual"),
                )
            else:
                logging.warning(f"Skipping unknown table chunk {tag!r}")
    except ChunkFormatError as e:
        raise TableFormatError(f"Corrupt table file: {e}")
    if header is None or header.get("version") != FORMAT_VERSION:
        raise TableFormatError("Missing or unsupported table header")
    missing = [name for name in TABLE_TAGS if name not in grids]
    if missing:
        raise TableFormatError(f"Table file lacks {', '.join(missing)}")
    return PrecompTables(**grids, report=report, settings=header.get("settings", {}))


def save_tables(tables: PrecompTables, path: str | Path) -> Path:
    buf = io.BytesIO()
    serialize_tables(tables, buf)
    return safe_write_bytes(path, buf.getvalue())


def load_tables(path: str | Path) -> PrecompTables:
    path = Path(path)
    if not path.is_file():
        raise TableFormatError(f"Table file not found: {path}")
    with open(path, "rb") as f:
        tables = deserialize_tables(f)
    logging.info(f"Loaded precomputed tables from {path} ({os.path.getsize(path)} bytes)")
    return tables
