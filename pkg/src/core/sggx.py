"""
SGGX normal distributions.

Conventions
-----------
* A lobe is stored as an eigenbasis ``rotation`` (rows w1, w2, w3) and the
  roughness pair ``alpha = (ax, ay)``; the matrix form is
  S = R^T diag(ax^2, ay^2, 1) R, i.e. S scaled so sigma(w3) = 1.
* ``sggx_density`` is the raw double-sided density
  D(w) = 1 / (pi ax ay (w^T S^-1 w)^2), normalized so that
  integral of D(w) |w . w3| over the sphere is 2.
* ``sggx_pdf`` divides by ``sggx_norm`` (the sphere integral of D) and is a
  probability density; NDF mixtures and all samplers use it.

The batched functions broadcast over leading axes: rotation (..., 3, 3),
alpha (..., 2), directions (..., 3).
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans

from src.core.spherical import (
    fibonacci_sphere,
    frames_to_local,
    frames_to_world,
    normalize,
    build_frame,
    uniform_sphere,
)

ALPHA_MIN = 1e-3
_NORM_PHI_NODES = 64
_MAX_REJECTION_ROUNDS = 64


def clamp_alpha(alpha: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(alpha, dtype=np.float64), ALPHA_MIN, 1.0)


# ---------------------------------------------------------------------------
# Batched kernels
# ---------------------------------------------------------------------------


def sggx_density(rotation: np.ndarray, alpha: np.ndarray, w: np.ndarray) -> np.ndarray:
    local = frames_to_local(rotation, w)
    ax = alpha[..., 0]
    ay = alpha[..., 1]
    q = (local[..., 0] / ax) ** 2 + (local[..., 1] / ay) ** 2 + local[..., 2] ** 2
    return 1.0 / (np.pi * ax * ay * q * q)


def ggx_hemisphere_integral(alpha: np.ndarray) -> np.ndarray:
    """
    Closed form of the solid-angle integral of an isotropic GGX D over its
    hemisphere: 1 + a^2 atanh(k)/k with k = sqrt(1 - a^2). Ranges over [1, 2].
    """
    alpha = np.clip(np.asarray(alpha, dtype=np.float64), 1e-12, 1.0)
    k = np.sqrt(np.maximum(1.0 - alpha * alpha, 0.0))
    safe_k = np.where(k < 1e-6, 1.0, k)
    ratio = np.where(k < 1e-6, 1.0 + k * k / 3.0, np.log((1.0 + k) / alpha) / safe_k)
    return 1.0 + alpha * alpha * ratio


def sggx_norm(alpha: np.ndarray) -> np.ndarray:
    """
    Sphere integral of the raw density. Equals 2 * mean over phi of the
    isotropic hemisphere integral at beta(phi)^2 = ax^2 cos^2 + ay^2 sin^2.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    phi = (np.arange(_NORM_PHI_NODES) + 0.5) * (2.0 * np.pi / _NORM_PHI_NODES)
    c2 = np.cos(phi) ** 2
    s2 = 1.0 - c2
    beta = np.sqrt(alpha[..., 0, None] ** 2 * c2 + alpha[..., 1, None] ** 2 * s2)
    return 2.0 * np.mean(ggx_hemisphere_integral(beta), axis=-1)


def sggx_pdf_batched(rotation: np.ndarray, alpha: np.ndarray, w: np.ndarray) -> np.ndarray:
    return sggx_density(rotation, alpha, w) / sggx_norm(alpha)


def sggx_smith_lambda(rotation: np.ndarray, alpha: np.ndarray, w: np.ndarray) -> np.ndarray:
    local = frames_to_local(rotation, w)
    z2 = local[..., 2] ** 2
    tan2 = (alpha[..., 0] ** 2 * local[..., 0] ** 2 + alpha[..., 1] ** 2 * local[..., 1] ** 2) / np.maximum(z2, 1e-300)
    lam = 0.5 * (np.sqrt(1.0 + tan2) - 1.0)
    return np.where(z2 < 1e-24, np.inf, lam)


def sggx_smith_g_batched(rotation, alpha, wi, wo) -> np.ndarray:
    """Height-correlated masking-shadowing, double-sided in the lobe frame."""
    total = 1.0 + sggx_smith_lambda(rotation, alpha, wi) + sggx_smith_lambda(rotation, alpha, wo)
    return np.where(np.isinf(total), 0.0, 1.0 / total)


def sample_sggx_density(rotation: np.ndarray, alpha: np.ndarray, rng) -> np.ndarray:
    """
    One exact sample of the normalized density per item.

    Uses the stretch identity: with A = diag(ax, ay, 1), w = A u / |A u| has
    density proportional to D when u has density proportional to |A u| on
    the sphere, which is drawn by rejection (acceptance >= 1/2).
    """
    rotation = np.asarray(rotation, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    n = alpha.shape[0]
    scale = np.concatenate([alpha, np.ones((n, 1))], axis=1)

    chosen = np.zeros((n, 3))
    done = np.zeros(n, dtype=bool)
    for _ in range(_MAX_REJECTION_ROUNDS):
        r = rng.random((n, 3))
        u = uniform_sphere(r[:, :2])
        sigma = np.linalg.norm(u * scale, axis=1)
        accept = (r[:, 2] < sigma) & ~done
        chosen[accept] = u[accept]
        pending = ~done & ~accept
        chosen[pending] = u[pending]
        done |= accept
        if done.all():
            break

    local = normalize(chosen * scale)
    return frames_to_world(rotation, local)


def quadrature_nodes(rotation: np.ndarray, alpha: np.ndarray, count: int = 64):
    """
    Deterministic quadrature of the lobe density: Fibonacci points u_q with
    weights |A u_q| mapped through the stretch. Returns (..., Q, 3) world
    directions and (..., Q) weights summing to one.
    """
    u = fibonacci_sphere(count)
    alpha = np.asarray(alpha, dtype=np.float64)
    scale = np.concatenate([alpha, np.ones(alpha.shape[:-1] + (1,))], axis=-1)
    stretched = u * scale[..., None, :]
    sigma = np.linalg.norm(stretched, axis=-1)
    weights = sigma / np.sum(sigma, axis=-1, keepdims=True)
    local = stretched / sigma[..., None]
    world = np.einsum("...ji,...qj->...qi", rotation, local)
    return world, weights


# ---------------------------------------------------------------------------
# Lobe and matrix types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SggxLobe:
    """Eigenbasis rows (w1, w2, w3) and roughness (ax, ay)."""

    rotation: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if np.max(np.abs(rotation @ rotation.T - np.eye(3))) > 1e-5:
            raise ValueError("SggxLobe rotation must be orthonormal")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "alpha", clamp_alpha(np.asarray(self.alpha).reshape(2)))

    @property
    def axis(self) -> np.ndarray:
        return self.rotation[2]

    @property
    def matrix(self) -> np.ndarray:
        lam = np.array([self.alpha[0] ** 2, self.alpha[1] ** 2, 1.0])
        return self.rotation.T @ np.diag(lam) @ self.rotation

    @classmethod
    def around(cls, axis: np.ndarray, alpha) -> "SggxLobe":
        frame = build_frame(normalize(axis))
        alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (2,))
        return cls(frame.matrix, alpha)


@dataclass(frozen=True)
class SggxMatrix:
    S: np.ndarray

    def __post_init__(self):
        S = np.asarray(self.S, dtype=np.float64).reshape(3, 3)
        if np.max(np.abs(S - S.T)) > 1e-9 * max(1.0, np.max(np.abs(S))):
            raise ValueError("SGGX matrix must be symmetric")
        object.__setattr__(self, "S", S)


def _as_matrix(obj) -> np.ndarray:
    if isinstance(obj, SggxLobe):
        return obj.matrix
    if isinstance(obj, SggxMatrix):
        return obj.S
    return np.asarray(obj, dtype=np.float64)


def regularize(S: np.ndarray) -> np.ndarray:
    eps = 1e-8 * max(float(np.trace(S)), 1e-30)
    return S + eps * np.eye(3)


def eigen_param(S) -> SggxLobe:
    """
    SGGX matrix to (eigenbasis, roughness): ax = sigma1/sigma3,
    ay = sigma2/sigma3 with eigenvalues ascending. Eigenvectors get their
    largest-magnitude component positive; w2 is rebuilt as w3 x w1.
    """
    S = _as_matrix(S)
    S = 0.5 * (S + S.T)
    values, vectors = np.linalg.eigh(S)
    if values[2] <= 0.0:
        raise ValueError("eigen_param: SGGX matrix has no positive eigenvalue")
    values = np.maximum(values, 0.0)

    basis = vectors.T.copy()
    for i in range(3):
        lead = np.argmax(np.abs(basis[i]))
        if basis[i, lead] < 0.0:
            basis[i] = -basis[i]
    basis[1] = np.cross(basis[2], basis[0])

    sigma = np.sqrt(values)
    alpha = np.array([sigma[0] / sigma[2], sigma[1] / sigma[2]])
    return SggxLobe(basis, alpha)


def fit_sggx_from_normals(normals: np.ndarray, weights: np.ndarray | None = None) -> SggxLobe:
    """Second-moment estimate S = E[n n^T] of a set of surface normals."""
    normals = normalize(normals)
    if weights is None:
        weights = np.ones(len(normals))
    weights = np.asarray(weights, dtype=np.float64)
    S = np.einsum("n,ni,nj->ij", weights, normals, normals) / np.sum(weights)
    return eigen_param(S)


def sggx_eval(lobe: SggxLobe, w: np.ndarray) -> np.ndarray:
    return sggx_density(lobe.rotation, lobe.alpha, w)


def sggx_eval_matrix(S, w: np.ndarray) -> np.ndarray:
    """Matrix form 1 / (pi sqrt|S| (w^T S^-1 w)^2), no rescaling of S."""
    S = _as_matrix(S)
    inv = np.linalg.inv(S)
    q = np.einsum("...i,ij,...j->...", w, inv, w)
    return 1.0 / (np.pi * np.sqrt(np.linalg.det(S)) * q * q)


def sggx_sigma(lobe_or_matrix, w: np.ndarray) -> np.ndarray:
    S = _as_matrix(lobe_or_matrix)
    return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", w, S, w), 0.0))


def sggx_pdf(lobe: SggxLobe, w: np.ndarray) -> np.ndarray:
    return sggx_eval(lobe, w) / sggx_norm(lobe.alpha)


def sggx_smith_g(lobe: SggxLobe, wi: np.ndarray, wo: np.ndarray) -> np.ndarray:
    return sggx_smith_g_batched(lobe.rotation, lobe.alpha, wi, wo)


def sggx_sample(lobe: SggxLobe, rng, n: int = 1) -> np.ndarray:
    rotation = np.broadcast_to(lobe.rotation, (n, 3, 3))
    alpha = np.broadcast_to(lobe.alpha, (n, 2))
    return sample_sggx_density(rotation, alpha, rng)


def sggx_sample_visible(lobe_or_matrix, view: np.ndarray, rng, n: int = 1) -> np.ndarray:
    """
    Visible-normal samples for a view direction: the
    projected ellipsoid is warped from a uniform disk by the factor of S
    expressed in the view frame.
    """
    S = _as_matrix(lobe_or_matrix)
    frame = build_frame(normalize(view))
    wk, wj, wi = frame.t, frame.b, frame.n

    for _ in range(2):
        s_kk = wk @ S @ wk
        s_jj = wj @ S @ wj
        s_ii = wi @ S @ wi
        s_kj = wk @ S @ wj
        s_ki = wk @ S @ wi
        s_ji = wj @ S @ wi
        tmp2 = s_jj * s_ii - s_ji * s_ji
        if s_ii > 0.0 and tmp2 > 0.0:
            break
        S = regularize(S)

    det = abs(s_kk * s_jj * s_ii - s_kj * s_kj * s_ii - s_ki * s_ki * s_jj - s_ji * s_ji * s_kk + 2.0 * s_kj * s_ki * s_ji)
    inv_sqrt_ii = 1.0 / np.sqrt(s_ii)
    tmp = np.sqrt(max(tmp2, 1e-300))
    mk = np.array([np.sqrt(det) / tmp, 0.0, 0.0])
    mj = np.array([-inv_sqrt_ii * (s_ki * s_ji - s_kj * s_ii) / tmp, inv_sqrt_ii * tmp, 0.0])
    mi = np.array([inv_sqrt_ii * s_ki, inv_sqrt_ii * s_ji, inv_sqrt_ii * s_ii])

    r = rng.random((n, 2))
    radius = np.sqrt(r[:, 0])
    phi = 2.0 * np.pi * r[:, 1]
    u = radius * np.cos(phi)
    v = radius * np.sin(phi)
    w = np.sqrt(np.maximum(1.0 - u * u - v * v, 0.0))
    m_kji = normalize(u[:, None] * mk + v[:, None] * mj + w[:, None] * mi)
    return m_kji[:, 0:1] * wk + m_kji[:, 1:2] * wj + m_kji[:, 2:3] * wi


# ---------------------------------------------------------------------------
# Mixtures
# ---------------------------------------------------------------------------

MAX_LOBES = 4


@dataclass(frozen=True)
class NdfMixture:
    weights: np.ndarray
    lobes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        lobes = tuple(self.lobes)
        if not 1 <= len(lobes) <= MAX_LOBES or len(lobes) != len(weights):
            raise ValueError(f"NdfMixture needs 1..{MAX_LOBES} lobes with one weight each")
        if np.any(weights <= 0.0) or abs(weights.sum() - 1.0) > 1e-6:
            raise ValueError("NdfMixture weights must be positive and sum to 1")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "lobes", lobes)

    @property
    def k(self) -> int:
        return len(self.lobes)

    @property
    def rotations(self) -> np.ndarray:
        return np.stack([lobe.rotation for lobe in self.lobes])

    @property
    def alphas(self) -> np.ndarray:
        return np.stack([lobe.alpha for lobe in self.lobes])

    @classmethod
    def single(cls, lobe: SggxLobe) -> "NdfMixture":
        return cls(np.ones(1), (lobe,))


def ndf_eval(mixture: NdfMixture, w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    total = np.zeros(w.shape[:-1])
    for weight, lobe in zip(mixture.weights, mixture.lobes):
        total = total + weight * sggx_pdf(lobe, w)
    return total


def ndf_sample(mixture: NdfMixture, rng, n: int = 1) -> np.ndarray:
    pick = rng.random((n, 1))[:, 0]
    index = np.minimum(np.searchsorted(np.cumsum(mixture.weights), pick, side="right"), mixture.k - 1)
    return sample_sggx_density(mixture.rotations[index], mixture.alphas[index], rng)


def ndf_log_likelihood(mixture: NdfMixture, normals: np.ndarray) -> float:
    density = ndf_eval(mixture, normalize(normals))
    return float(np.sum(np.log(np.maximum(density, 1e-300))))


def sggx_expectation(lobe: SggxLobe, h, count: int = 128) -> float:
    """E[h(w)] under the normalized lobe density, by the stretched quadrature."""
    directions, weights = quadrature_nodes(lobe.rotation, lobe.alpha, count)
    return float(np.sum(weights * np.asarray(h(directions), dtype=np.float64)))


def _axial_features(normals: np.ndarray) -> np.ndarray:
    """Sign-invariant embedding n n^T (upper triangle), so n and -n cluster together."""
    x, y, z = normals[:, 0], normals[:, 1], normals[:, 2]
    r2 = np.sqrt(2.0)
    return np.stack([x * x, y * y, z * z, r2 * x * y, r2 * x * z, r2 * y * z], axis=1)


def fit_ndf_mixture(normals: np.ndarray, max_lobes: int = MAX_LOBES, seed: int = 0) -> NdfMixture:
    """
    K-means over the normal samples for k = 1..max_lobes, one SGGX lobe per
    cluster by second moments, keeping the k with the highest log-likelihood.
    """
    normals = normalize(np.asarray(normals, dtype=np.float64))
    if len(normals) == 0:
        raise ValueError("fit_ndf_mixture: no normals")
    features = _axial_features(normals)

    best = NdfMixture.single(fit_sggx_from_normals(normals))
    best_ll = ndf_log_likelihood(best, normals)
    distinct = len(np.unique(np.round(features, 6), axis=0))
    for k in range(2, min(max_lobes, MAX_LOBES, distinct) + 1):
        labels = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=50, random_state=seed).fit_predict(features)
        counts = np.bincount(labels, minlength=k)
        if np.any(counts == 0):
            continue
        lobes = tuple(fit_sggx_from_normals(normals[labels == c]) for c in range(k))
        candidate = NdfMixture(counts / counts.sum(), lobes)
        ll = ndf_log_likelihood(candidate, normals)
        if ll > best_ll:
            best, best_ll = candidate, ll
    logging.debug(f"NDF fit: {best.k} lobe(s), log-likelihood {best_ll:.3f}")
    return best
