"""
Truncated ellipsoid primitives: the intersection of a voxel box with a
bounding ellipsoid {x : (x - c)^T M (x - c) <= 1} of the voxel's geometry.

Only the projected area |B|_w of the primitive is ever needed; the
primitive coverage ratio is never materialized.
"""

import logging
from dataclasses import dataclass

import numpy as np

from src.core.spherical import (
    build_frames,
    concentric_square_to_disk,
    equal_area_sphere_to_square,
    square_to_texel,
)
from src.utils.rng import CounterStream, hash_keys

DIAGONAL_CLAMP = 1.05
DEGENERATE_RADIUS = 1e-3
DIRECTION_BUCKETS = 8  # 8 x 8 = 64 equal-area buckets
_RITTER_ROUNDS = 64
_INTERVAL_EPS = 1e-12


@dataclass(frozen=True)
class TruncEllipsoid:
    center: np.ndarray
    matrix: np.ndarray
    box_min: np.ndarray
    box_max: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        if not np.allclose(m, m.T, rtol=0.0, atol=1e-9 * max(np.abs(m).max(), 1.0)):
            raise ValueError("TruncEllipsoid matrix must be symmetric")
        if np.any(np.linalg.eigvalsh(m) <= 0.0):
            raise ValueError("TruncEllipsoid matrix must be positive definite")
        object.__setattr__(self, "matrix", 0.5 * (m + m.T))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "box_min", np.asarray(self.box_min, dtype=np.float64).reshape(3))
        object.__setattr__(self, "box_max", np.asarray(self.box_max, dtype=np.float64).reshape(3))

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.matrix)

    @property
    def semi_axes(self) -> np.ndarray:
        return 1.0 / np.sqrt(np.linalg.eigvalsh(self.matrix))

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        d = np.asarray(points, dtype=np.float64) - self.center
        return np.einsum("...i,ij,...j->...", d, self.matrix, d) <= 1.0 + tol

    def to_array(self) -> np.ndarray:
        """center(3) + upper triangle of M (6) + box (6)."""
        iu = np.triu_indices(3)
        return np.concatenate([self.center, self.matrix[iu], self.box_min, self.box_max])

    @classmethod
    def from_array(cls, values: np.ndarray) -> "TruncEllipsoid":
        v = np.asarray(values, dtype=np.float64)
        m = np.zeros((3, 3))
        m[np.triu_indices(3)] = v[3:9]
        m = m + np.triu(m, 1).T
        return cls(v[0:3], m, v[9:12], v[12:15])

    @classmethod
    def box_only(cls, box_min: np.ndarray, box_max: np.ndarray) -> "TruncEllipsoid":
        """A primitive equal to the box: the ellipsoid is the circumscribed sphere, slightly inflated."""
        lo = np.asarray(box_min, dtype=np.float64)
        hi = np.asarray(box_max, dtype=np.float64)
        r = 0.5 * np.linalg.norm(hi - lo) * 1.001
        return cls(0.5 * (lo + hi), np.eye(3) / (r * r), lo, hi)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def _ritter_sphere(points: np.ndarray) -> tuple[np.ndarray, float]:
    p0 = points[0]
    p1 = points[np.argmax(np.sum((points - p0) ** 2, axis=1))]
    p2 = points[np.argmax(np.sum((points - p1) ** 2, axis=1))]
    center = 0.5 * (p1 + p2)
    radius = 0.5 * np.linalg.norm(p2 - p1)
    for _ in range(_RITTER_ROUNDS):
        d = np.linalg.norm(points - center, axis=1)
        far = int(np.argmax(d))
        if d[far] <= radius:
            break
        new_radius = 0.5 * (radius + d[far])
        center = center + (d[far] - new_radius) / d[far] * (points[far] - center)
        radius = new_radius
    radius = max(radius, float(np.max(np.linalg.norm(points - center, axis=1))))
    return center, radius


def fit_primitive(positions: np.ndarray, box_min: np.ndarray, box_max: np.ndarray) -> TruncEllipsoid:
    """
    PCA frame, per-axis scaling of the points to the unit cube, Ritter
    bounding sphere there, mapped back to a world ellipsoid. Ellipsoids
    wider than the clamp are replaced by the box circumsphere, which makes
    the primitive the box itself.
    """
    points = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("fit_primitive needs at least one position")
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    size = float(np.max(box_max - box_min))
    diagonal = float(np.linalg.norm(box_max - box_min))
    floor = DEGENERATE_RADIUS * size

    mean = points.mean(axis=0)
    centered = points - mean
    if len(points) == 1 or np.max(np.abs(centered)) < 1e-12 * max(size, 1.0):
        return TruncEllipsoid(mean, np.eye(3) / (floor * floor), box_min, box_max)

    cov = centered.T @ centered / len(points)
    _, axes = np.linalg.eigh(cov)
    local = centered @ axes
    lo = local.min(axis=0)
    hi = local.max(axis=0)
    mid = 0.5 * (lo + hi)
    half = np.maximum(0.5 * (hi - lo), floor)
    unit = (local - mid) / half

    sphere_center, radius = _ritter_sphere(unit)
    radius *= 1.0 + 1e-6
    semi = half * radius
    if np.max(semi) > 0.5 * DIAGONAL_CLAMP * diagonal:
        logging.debug("Ellipsoid exceeds the diagonal clamp; using the box primitive")
        return TruncEllipsoid.box_only(box_min, box_max)

    center = mean + axes @ (mid + sphere_center * half)
    matrix = axes @ np.diag(1.0 / semi ** 2) @ axes.T
    return TruncEllipsoid(center, matrix, box_min, box_max)


# ---------------------------------------------------------------------------
# Ray intersection (batched over primitives and rays)
# ---------------------------------------------------------------------------


def box_interval(box_min, box_max, origins, directions):
    safe = np.where(np.abs(directions) < 1e-300, 1e-300, directions)
    t0 = (box_min - origins) / safe
    t1 = (box_max - origins) / safe
    near = np.max(np.minimum(t0, t1), axis=-1)
    far = np.min(np.maximum(t0, t1), axis=-1)
    return near, far


def ellipsoid_interval(center, matrix, origins, directions):
    x = origins - center
    md = np.einsum("...ij,...j->...i", matrix, directions)
    a = np.sum(directions * md, axis=-1)
    b = 2.0 * np.sum(x * md, axis=-1)
    c = np.einsum("...i,...ij,...j->...", x, matrix, x) - 1.0
    disc = b * b - 4.0 * a * c
    root = np.sqrt(np.maximum(disc, 0.0))
    near = (-b - root) / (2.0 * a)
    far = (-b + root) / (2.0 * a)
    miss = disc <= 0.0
    return np.where(miss, np.inf, near), np.where(miss, -np.inf, far)


def intersect_batch(center, matrix, box_min, box_max, origins, directions, t_min: float = 0.0):
    """Interval of each ray inside its truncated ellipsoid; hit is False for empty or zero-length intervals."""
    bn, bf = box_interval(box_min, box_max, origins, directions)
    en, ef = ellipsoid_interval(center, matrix, origins, directions)
    enter = np.maximum(np.maximum(bn, en), t_min)
    exit_ = np.minimum(bf, ef)
    hit = exit_ - enter > _INTERVAL_EPS
    return enter, exit_, hit


def intersect(prim: TruncEllipsoid, origin: np.ndarray, direction: np.ndarray, t_min: float = 0.0):
    """(t_enter, t_exit) of the ray inside the primitive, or None."""
    enter, exit_, hit = intersect_batch(
        prim.center, prim.matrix, prim.box_min, prim.box_max,
        np.asarray(origin, dtype=np.float64), np.asarray(direction, dtype=np.float64), t_min,
    )
    if not bool(hit):
        return None
    return float(enter), float(exit_)


# ---------------------------------------------------------------------------
# Projected area
# ---------------------------------------------------------------------------


def box_projected_area(box_min, box_max, omega) -> np.ndarray:
    s = np.asarray(box_max) - np.asarray(box_min)
    faces = np.stack([s[..., 1] * s[..., 2], s[..., 0] * s[..., 2], s[..., 0] * s[..., 1]], axis=-1)
    return np.sum(np.abs(omega) * faces, axis=-1)


def _box_corners(box_min, box_max) -> np.ndarray:
    bits = np.array([[(i >> k) & 1 for k in range(3)] for i in range(8)], dtype=np.float64)
    return box_min[..., None, :] + bits * (box_max - box_min)[..., None, :]


def _cholesky(a: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        eps = 1e-8 * np.trace(a, axis1=-2, axis2=-1)
        return np.linalg.cholesky(a + eps[..., None, None] * np.eye(3))


def stratified_disk(count: int, u: np.ndarray) -> np.ndarray:
    """Jittered strata of a square side ceil(sqrt(count)), concentric-mapped to the disk."""
    side = int(np.ceil(np.sqrt(count)))
    k = np.arange(count)
    cell = np.stack([k % side, k // side], axis=-1).astype(np.float64)
    return concentric_square_to_disk((cell + u) / side)


def projected_area_batch(center, matrix, box_min, box_max, omega, rng, samples: int = 16) -> np.ndarray:
    """
    |B|_w for B (primitive, direction) pairs. Exact when the ellipsoid lies
    inside the box or the box inside the ellipsoid; otherwise stratified
    points of the projected ellipse are tested by casting lines along w
    through the truncated ellipsoid.
    """
    center = np.asarray(center, dtype=np.float64)
    matrix = np.asarray(matrix, dtype=np.float64)
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    # lines along w and -w coincide
    omega = np.where(omega[:, 2:3] < 0.0, -omega, omega)
    n = len(omega)

    inverse = np.linalg.inv(matrix)
    frames = build_frames(omega)  # rows wx, wy, w
    m_omega_inv = frames @ inverse @ np.swapaxes(frames, -1, -2)
    ellipse_area = np.pi * np.sqrt(np.maximum(np.linalg.det(m_omega_inv[:, :2, :2]), 0.0))

    half = np.sqrt(np.maximum(np.diagonal(inverse, axis1=-2, axis2=-1), 0.0))
    ellipsoid_inside = np.all((center - half >= box_min) & (center + half <= box_max), axis=-1)
    corners = _box_corners(box_min, box_max) - center[:, None, :]
    box_inside = np.all(np.einsum("nci,nij,ncj->nc", corners, matrix, corners) <= 1.0, axis=-1)

    out = np.where(box_inside, box_projected_area(box_min, box_max, omega), ellipse_area)
    todo = ~(ellipsoid_inside | box_inside)
    u = rng.random((n, samples, 2))
    if not np.any(todo):
        return out

    idx = np.nonzero(todo)[0]
    chol = _cholesky(m_omega_inv[idx])
    disk = stratified_disk(samples, u[idx])
    lift = np.sqrt(np.maximum(1.0 - np.sum(disk * disk, axis=-1), 0.0))
    p = np.concatenate([disk, lift[..., None]], axis=-1)
    local = np.einsum("nij,nsj->nsi", chol, p)
    world = np.einsum("nji,nsj->nsi", frames[idx], local) + center[idx, None, :]
    d = np.broadcast_to(omega[idx, None, :], world.shape)
    _, _, hit = intersect_batch(
        center[idx, None, :], matrix[idx, None], box_min[idx, None, :], box_max[idx, None, :],
        world, d, t_min=-np.inf,
    )
    out[idx] = hit.mean(axis=1) * ellipse_area[idx]
    return out


def direction_bucket(omega: np.ndarray) -> np.ndarray:
    """64-bucket equal-area quantization of +-omega, used only to derive seeds."""
    w = np.where(np.asarray(omega)[..., 2:3] < 0.0, -np.asarray(omega), omega)
    row, col = square_to_texel(equal_area_sphere_to_square(w), DIRECTION_BUCKETS)
    return row * DIRECTION_BUCKETS + col


def projected_area_stream(seed, voxel_keys: np.ndarray, omega: np.ndarray) -> CounterStream:
    """Deterministic per-(voxel, direction bucket) stream; symmetric in +-omega.

    ``seed`` may be an array broadcasting against ``voxel_keys``; the renderer
    passes one key per cone sample so that estimate errors average out over
    the samples of a pixel instead of repeating in every pixel the voxel covers.
    """
    return CounterStream(hash_keys(seed, np.asarray(voxel_keys, dtype=np.uint64), direction_bucket(omega)))


def projected_area(prim: TruncEllipsoid, omega: np.ndarray, samples: int = 16, rng=None) -> float:
    omega = np.asarray(omega, dtype=np.float64).reshape(1, 3)
    if rng is None:
        rng = projected_area_stream(0, np.zeros(1, dtype=np.uint64), omega)
    return float(projected_area_batch(
        prim.center[None], prim.matrix[None], prim.box_min[None], prim.box_max[None], omega, rng, samples,
    )[0])
