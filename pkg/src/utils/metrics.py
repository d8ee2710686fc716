import math

import numpy as np


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    """Root mean squared error over all linear RGB values."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"Shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """20·log10(peak / RMSE); identical inputs give +inf."""
    error = rmse(a, b)
    if error == 0.0:
        return math.inf
    return 20.0 * math.log10(peak / error)


def format_psnr(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.2f}"


def relative_l2(estimate: np.ndarray, target: np.ndarray, weights: np.ndarray | None = None) -> float:
    estimate = np.asarray(estimate, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    w = np.ones_like(target) if weights is None else np.asarray(weights, dtype=np.float64)
    denom = np.sqrt(np.sum(w * target ** 2))
    if denom == 0.0:
        return float(np.sqrt(np.sum(w * estimate ** 2)))
    return float(np.sqrt(np.sum(w * (estimate - target) ** 2)) / denom)


def high_pass_energy(image: np.ndarray) -> float:
    """
    Mean squared response of a 3x3 Laplacian; used to measure blocky
    checkerboard artifacts in LoD renders.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    lap = (
        4.0 * img[1:-1, 1:-1]
        - img[:-2, 1:-1]
        - img[2:, 1:-1]
        - img[1:-1, :-2]
        - img[1:-1, 2:]
    )
    return float(np.mean(lap ** 2)) if lap.size else 0.0
