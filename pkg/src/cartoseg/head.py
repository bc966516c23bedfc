"""Linear probing head: feature upsampling, per-pixel classification, thresholding.

The default pipeline bilinearly upsamples the patch-feature grid to the
target resolution and only then applies the linear classifier + sigmoid,
so interpolation happens in feature space rather than on logits or
probabilities. The reversed order (classify at grid resolution, then
upsample the logits) is available behind a flag for ablations.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from ._bilinear import resize_bilinear_hwc
from .errors import DimensionError


class ProbeHead(nn.Module):
    """Per-pixel linear classifier: sigmoid(z . w + b)."""

    def __init__(self, dim: int, threshold: float = 0.5):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(dim))
        self.b = nn.Parameter(torch.zeros(()))
        self.threshold = threshold
        nn.init.trunc_normal_(self.w, std=0.02)

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return classify(features, self)


def upsample_features(grid: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Bilinearly upsample a (..., H', W', D) feature grid to (..., H, W, D).

    Half-pixel-center convention; target must be at least as large as the
    source in both axes (shrinking belongs to the data resizer).
    """
    if grid.ndim < 3:
        raise DimensionError(f"expected (..., H', W', D) grid, got shape {tuple(grid.shape)}")
    gh, gw = grid.shape[-3], grid.shape[-2]
    if height < gh or width < gw:
        raise DimensionError(
            f"target {height}x{width} is smaller than the grid {gh}x{gw}; use the data resizer"
        )
    return resize_bilinear_hwc(grid, height, width)


def classify(features: torch.Tensor, head: ProbeHead) -> torch.Tensor:
    """Apply the linear probe per pixel: (..., H, W, D) -> (..., H, W) probabilities."""
    if features.shape[-1] != head.dim:
        raise DimensionError(
            f"feature depth {features.shape[-1]} does not match head dimension {head.dim}"
        )
    return torch.sigmoid(features @ head.w + head.b)


def logits(features: torch.Tensor, head: ProbeHead) -> torch.Tensor:
    """Pre-sigmoid scores, used by the reversed-order ablation."""
    if features.shape[-1] != head.dim:
        raise DimensionError(
            f"feature depth {features.shape[-1]} does not match head dimension {head.dim}"
        )
    return features @ head.w + head.b


def probability_mask(
    grid: torch.Tensor,
    head: ProbeHead,
    height: int,
    width: int,
    classify_first: bool = False,
) -> torch.Tensor:
    """Full head pipeline from a feature grid to an (..., H, W) probability mask.

    ``classify_first=True`` switches to the ablation order: per-patch
    probabilities at grid resolution are upsampled. (Upsampling pre-sigmoid
    logits would be equivalent to the default order, since the linear probe
    commutes with bilinear interpolation; only the post-sigmoid order
    actually differs.)
    """
    if classify_first:
        probs = classify(grid, head).unsqueeze(-1)
        return upsample_features(probs, height, width).squeeze(-1)
    return classify(upsample_features(grid, height, width), head)


def predict_mask(probabilities, threshold: float = 0.5) -> np.ndarray:
    """Binarize probabilities with a strict > comparison (0.5 ties go to background)."""
    if isinstance(probabilities, torch.Tensor):
        probs = probabilities.detach().cpu().numpy()
    else:
        probs = np.asarray(probabilities)
    return (probs > threshold).astype(np.uint8)
