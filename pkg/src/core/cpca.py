"""
Clustered PCA of flattened visibility tiles.

Tiles are clustered with k-means; each cluster keeps its mean tile and the
top-k left-singular vectors of its mean-subtracted tile matrix as
representatives, with one projection weight row per tile. Entirely visible
or occluded tiles are culled before clustering.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import eigsh
from sklearn.cluster import KMeans

CULL_EPS = 1e-6
FITTED = -1.0  # marker in ``constant`` for tiles that went through clustering


@dataclass(frozen=True)
class CpcaCodebook:
    """
    labels (n,) cluster id per tile (-1 when culled); constant (n,) the
    culled value (0 or 1) or FITTED; means (C, P); bases (C, R, P) with
    rows beyond ``ranks[c]`` zero; weights (n, R).
    """

    labels: np.ndarray
    constant: np.ndarray
    means: np.ndarray
    bases: np.ndarray
    ranks: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if len(self.labels) != len(self.weights) or len(self.labels) != len(self.constant):
            raise ValueError("CpcaCodebook: per-tile arrays disagree in length")
        if len(self.means) != len(self.bases) or len(self.means) != len(self.ranks):
            raise ValueError("CpcaCodebook: per-cluster arrays disagree in length")

    @property
    def clusters(self) -> int:
        return len(self.means)

    @property
    def reps(self) -> int:
        return self.bases.shape[1]

    @property
    def tile_size(self) -> int:
        return self.means.shape[1]


def _top_left_singular(centered: np.ndarray, k: int, lanczos: bool) -> np.ndarray:
    """
    Top-k left-singular vectors of C (P x m, columns are tiles) from the
    smaller of C C^T and C^T C. Returns (k, P) rows.
    """
    p, m = centered.shape
    use_outer = p <= m
    gram = centered @ centered.T if use_outer else centered.T @ centered
    dim = gram.shape[0]
    if lanczos and k < dim - 1:
        values, vectors = eigsh(gram, k=k, which="LA")
    else:
        values, vectors = np.linalg.eigh(gram)
    order = np.argsort(values)[::-1][:k]
    values = np.maximum(values[order], 0.0)
    vectors = vectors[:, order]
    if use_outer:
        u = vectors
    else:
        sigma = np.sqrt(values)
        keep = sigma > 1e-10 * max(float(sigma.max(initial=0.0)), 1e-300)
        u = np.zeros((p, k))
        u[:, keep] = centered @ vectors[:, keep] / sigma[keep]
    # sign convention: largest-magnitude entry positive
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivot, np.arange(u.shape[1])])
    return (u * np.where(signs == 0.0, 1.0, signs)).T


def cpca_fit(
    tiles: np.ndarray,
    clusters: int,
    reps: int,
    seed: int = 0,
    lanczos: bool = False,
) -> CpcaCodebook:
    tiles = np.asarray(tiles, dtype=np.float64)
    n, p = tiles.shape
    if n == 0:
        raise ValueError("cpca_fit needs at least one tile")

    visible = np.all(tiles >= 1.0 - CULL_EPS, axis=1)
    occluded = np.all(tiles <= CULL_EPS, axis=1)
    constant = np.where(visible, 1.0, np.where(occluded, 0.0, FITTED))
    active = np.nonzero(constant == FITTED)[0]
    labels = np.full(n, -1, dtype=np.int32)
    weights = np.zeros((n, reps))

    if len(active) == 0:
        return CpcaCodebook(labels, constant, np.zeros((0, p)), np.zeros((0, reps, p)), np.zeros(0, dtype=np.int32), weights)

    x = tiles[active]
    k = min(clusters, len(np.unique(x, axis=0)))
    if k > 1:
        fitted = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=50, random_state=seed).fit_predict(x)
    else:
        fitted = np.zeros(len(x), dtype=np.int32)
    # drop clusters k-means left empty
    used, fitted = np.unique(fitted, return_inverse=True)
    k = len(used)
    labels[active] = fitted

    means = np.zeros((k, p))
    bases = np.zeros((k, reps, p))
    ranks = np.zeros(k, dtype=np.int32)
    for c in range(k):
        members = np.nonzero(fitted == c)[0]
        block = x[members]
        means[c] = block.mean(axis=0)
        rank = min(reps, len(members), p)
        if rank < reps:
            logging.warning(f"CPCA cluster {c} has {len(members)} members; representatives reduced to {rank}")
        ranks[c] = rank
        if rank == 0:
            continue
        centered = (block - means[c]).T
        bases[c, :rank] = _top_left_singular(centered, rank, lanczos)
        weights[active[members], :rank] = (block - means[c]) @ bases[c, :rank].T
    return CpcaCodebook(labels, constant, means, bases, ranks, weights)


def cpca_reconstruct(codebook: CpcaCodebook, item: int) -> np.ndarray:
    label = int(codebook.labels[item])
    if label < 0:
        return np.full(codebook.tile_size, codebook.constant[item])
    return codebook.means[label] + codebook.weights[item] @ codebook.bases[label]


def cpca_reconstruct_all(codebook: CpcaCodebook, tile_size: int) -> np.ndarray:
    n = len(codebook.labels)
    out = np.repeat(codebook.constant[:, None], tile_size, axis=1)
    fitted = codebook.labels >= 0
    if np.any(fitted):
        lab = codebook.labels[fitted]
        out[fitted] = codebook.means[lab] + np.einsum("nr,nrp->np", codebook.weights[fitted], codebook.bases[lab])
    return out.reshape(n, tile_size)


def cpca_error(tiles: np.ndarray, codebook: CpcaCodebook) -> float:
    """Total squared reconstruction error."""
    tiles = np.asarray(tiles, dtype=np.float64)
    return float(np.sum((cpca_reconstruct_all(codebook, tiles.shape[1]) - tiles) ** 2))
