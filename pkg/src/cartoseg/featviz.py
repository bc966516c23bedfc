"""PCA projection of patch features to an RGB visualization."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DegenerateInputError, DimensionError


@dataclass(frozen=True)
class PCABasis:
    """Top-k principal directions of a feature cloud."""

    mean: np.ndarray  # (D,)
    components: np.ndarray  # (k, D), orthonormal rows
    explained_variance: np.ndarray  # (k,), nonincreasing


def pca_fit(features: np.ndarray, k: int = 3) -> PCABasis:
    """Fit the top-k principal components of an (N, D) feature matrix.

    Deterministic sign convention: each component's largest-magnitude
    coefficient is made positive (first index wins ties).
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise DimensionError(f"expected (N, D) features, got shape {feats.shape}")
    n, d = feats.shape
    if n < k:
        raise DimensionError(f"need at least k={k} samples, got {n}")
    if d < k:
        raise DimensionError(f"need at least k={k} feature dimensions, got {d}")
    mean = feats.mean(axis=0)
    centered = feats - mean
    if not np.any(centered):
        raise DegenerateInputError("features have zero variance; PCA is undefined")
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:k].copy()
    for row in components:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    variance = (singular[:k] ** 2) / (n - 1) if n > 1 else singular[:k] ** 2
    return PCABasis(mean=mean, components=components, explained_variance=variance)


def project_to_rgb(grid: np.ndarray, basis: PCABasis) -> np.ndarray:
    """Project an (H', W', D) grid onto the basis and min-max map to [0, 1].

    Each output channel is normalized independently; a constant channel
    maps to 0.5.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or grid.shape[-1] != basis.mean.shape[0]:
        raise DimensionError(
            f"grid shape {grid.shape} does not match basis dimension {basis.mean.shape[0]}"
        )
    proj = (grid - basis.mean) @ basis.components.T
    out = np.empty_like(proj)
    for c in range(proj.shape[-1]):
        channel = proj[:, :, c]
        lo, hi = channel.min(), channel.max()
        out[:, :, c] = 0.5 if hi == lo else (channel - lo) / (hi - lo)
    return out


def render_rgb_png(
    rgb: np.ndarray, path: str | Path, out_size: tuple[int, int] | None = None
) -> Path:
    """Save an RGB visualization, optionally upsampled with nearest-neighbor
    so patch boundaries stay crisp."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if out_size is not None:
        h, w = rgb.shape[:2]
        rows = np.minimum((np.arange(out_size[0]) * h) // out_size[0], h - 1)
        cols = np.minimum((np.arange(out_size[1]) * w) // out_size[1], w - 1)
        rgb = rgb[rows][:, cols]
    path = Path(path)
    Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)).save(path)
    return path
