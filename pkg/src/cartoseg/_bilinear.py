"""Shared bilinear interpolation core.

Single implementation used by both the feature-upsampling head and the
image resizer so the whole toolkit agrees on one convention:

* half-pixel centers (source coord = (i + 0.5) * in/out - 0.5),
* edges replicated (coordinates clamped to the valid range),
* lerp form ``a + t * (b - a)``, which reproduces constant inputs exactly.

Built from plain torch indexing so gradients flow through it.
"""

from __future__ import annotations

import torch

from .errors import DimensionError


def _axis_coords(out_size: int, in_size: int, dtype, device):
    """Low/high source indices and fractional weights for one axis."""
    scale = in_size / out_size
    x = (torch.arange(out_size, dtype=dtype, device=device) + 0.5) * scale - 0.5
    x = x.clamp(0.0, float(in_size - 1))
    lo = x.floor().long()
    hi = torch.clamp(lo + 1, max=in_size - 1)
    frac = x - lo.to(dtype)
    return lo, hi, frac


def resize_bilinear_hwc(t: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Resize over the (-3, -2) axes of a (..., H, W, C) tensor.

    Accepts (H, W, C) and (B, H, W, C) layouts. Returns a copy even when the
    target equals the source size, so callers may mutate the result freely.
    """
    if t.ndim < 3:
        raise DimensionError(f"expected (..., H, W, C) tensor, got shape {tuple(t.shape)}")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"target size {out_h}x{out_w} must be positive")
    h, w = t.shape[-3], t.shape[-2]
    if (h, w) == (out_h, out_w):
        return t.clone()
    if not torch.is_floating_point(t):
        raise DimensionError(f"bilinear resize needs a floating tensor, got {t.dtype}")

    lo_y, hi_y, fy = _axis_coords(out_h, h, t.dtype, t.device)
    lo_x, hi_x, fx = _axis_coords(out_w, w, t.dtype, t.device)

    top = t.index_select(-3, lo_y)
    bot = t.index_select(-3, hi_y)
    rows = top + fy.view(-1, 1, 1) * (bot - top)

    left = rows.index_select(-2, lo_x)
    right = rows.index_select(-2, hi_x)
    return left + fx.view(-1, 1) * (right - left)
