"""Tiling of large scans, stitching of per-tile outputs, and bilinear resize.

The evaluation protocol for large scans crops non-overlapping square tiles;
right/bottom remainders are covered by reflection padding that the stitcher
crops away again, so a tile -> stitch round trip reproduces the scan
exactly when stride == tile_size.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .._bilinear import resize_bilinear_hwc
from ..errors import ConfigError, DimensionError
from .samples import SegmentationSample


@dataclass(frozen=True)
class TilingLayout:
    """Bookkeeping required to place tile outputs back onto the scan."""

    scan_shape: tuple[int, int]
    padded_shape: tuple[int, int]
    tile_size: int
    stride: int
    origins: tuple[tuple[int, int], ...]


def _reflect_pad(array: np.ndarray, pad_bottom: int, pad_right: int) -> np.ndarray:
    """Reflection padding that tolerates pads larger than the array itself."""
    out = array
    while pad_bottom > 0 or pad_right > 0:
        step_b = min(pad_bottom, out.shape[0] - 1)
        step_r = min(pad_right, out.shape[1] - 1)
        if step_b == 0 and pad_bottom > 0 or step_r == 0 and pad_right > 0:
            raise DimensionError("cannot reflection-pad a degenerate 1-pixel axis")
        pad = [(0, step_b), (0, step_r)] + [(0, 0)] * (out.ndim - 2)
        out = np.pad(out, pad, mode="reflect")
        pad_bottom -= step_b
        pad_right -= step_r
    return out


def _tile_starts(extent: int, tile: int, stride: int) -> list[int]:
    if stride == tile:
        # Keep the regular lattice; reflection padding covers the remainder.
        return [i * tile for i in range(max(1, -(-extent // tile)))]
    starts = list(range(0, max(extent - tile, 0) + 1, stride))
    if starts[-1] + tile < extent:
        starts.append(extent - tile)
    return starts


def tile_image(
    scan: np.ndarray,
    tile_size: int,
    stride: int | None = None,
    mask: np.ndarray | None = None,
    ignore: np.ndarray | None = None,
    source_id: str = "",
) -> tuple[list[SegmentationSample], TilingLayout]:
    """Cut a scan into tiles; remainders are covered by reflection padding.

    ``stride`` defaults to ``tile_size`` (non-overlapping). Mask and ignore
    rasters, when given, are tiled identically; tiles without a mask get
    zero masks. Returns the tiles in raster order plus the layout needed to
    stitch outputs back.
    """
    if tile_size < 1:
        raise ConfigError(f"tile_size must be >= 1, got {tile_size}")
    stride = tile_size if stride is None else stride
    if stride < 1 or stride > tile_size:
        raise ConfigError(f"stride must be in [1, tile_size], got {stride}")
    if scan.ndim == 2:
        scan = scan[:, :, None]
    h, w = scan.shape[:2]
    if h < tile_size and w < tile_size:
        warnings.warn(
            f"scan {h}x{w} is smaller than one {tile_size}px tile; emitting a single padded tile"
        )

    ys = _tile_starts(h, tile_size, stride)
    xs = _tile_starts(w, tile_size, stride)
    pad_bottom = max(ys[-1] + tile_size - h, 0)
    pad_right = max(xs[-1] + tile_size - w, 0)

    padded = _reflect_pad(scan, pad_bottom, pad_right)
    padded_mask = _reflect_pad(mask[:, :, None], pad_bottom, pad_right)[:, :, 0] if mask is not None else None
    padded_ignore = _reflect_pad(ignore[:, :, None], pad_bottom, pad_right)[:, :, 0] if ignore is not None else None

    tiles = []
    origins = []
    for y in ys:
        for x in xs:
            sl = (slice(y, y + tile_size), slice(x, x + tile_size))
            tiles.append(
                SegmentationSample(
                    image=np.ascontiguousarray(padded[sl]),
                    mask=(
                        np.ascontiguousarray(padded_mask[sl])
                        if padded_mask is not None
                        else np.zeros((tile_size, tile_size), dtype=np.uint8)
                    ),
                    ignore=np.ascontiguousarray(padded_ignore[sl]) if padded_ignore is not None else None,
                    source_id=source_id,
                    origin=(y, x),
                )
            )
            origins.append((y, x))
    layout = TilingLayout(
        scan_shape=(h, w),
        padded_shape=padded.shape[:2],
        tile_size=tile_size,
        stride=stride,
        origins=tuple(origins),
    )
    return tiles, layout


def stitch_tiles(
    tile_outputs: list[np.ndarray], layout: TilingLayout, average_overlaps: bool = False
) -> np.ndarray:
    """Place per-tile outputs back onto the scan and crop the padding.

    With the non-overlapping protocol this is direct placement and the
    round trip is exact; ``average_overlaps`` switches to mean blending for
    overlapped strides.
    """
    if len(tile_outputs) != len(layout.origins):
        raise DimensionError(
            f"got {len(tile_outputs)} tiles for a layout with {len(layout.origins)} origins"
        )
    t = layout.tile_size
    first = np.asarray(tile_outputs[0])
    extra = first.shape[2:]
    if average_overlaps:
        acc = np.zeros(layout.padded_shape + extra, dtype=np.float64)
        cnt = np.zeros(layout.padded_shape, dtype=np.int64)
        for out, (y, x) in zip(tile_outputs, layout.origins):
            acc[y: y + t, x: x + t] += np.asarray(out, dtype=np.float64)
            cnt[y: y + t, x: x + t] += 1
        cnt = np.maximum(cnt, 1)
        full = (acc / cnt.reshape(cnt.shape + (1,) * len(extra))).astype(first.dtype)
    else:
        full = np.zeros(layout.padded_shape + extra, dtype=first.dtype)
        for out, (y, x) in zip(tile_outputs, layout.origins):
            if np.asarray(out).shape[:2] != (t, t):
                raise DimensionError(f"tile output shape {np.asarray(out).shape} != ({t}, {t}, ...)")
            full[y: y + t, x: x + t] = out
    h, w = layout.scan_shape
    return full[:h, :w]


def resize_bilinear(array: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-center bilinear resize of (H, W) or (H, W, C) float arrays.

    Masks go through as probabilities and are thresholded downstream.
    Constant inputs are preserved exactly; an identity resize returns a
    bit-equal copy.
    """
    if array.ndim not in (2, 3):
        raise DimensionError(f"expected (H, W) or (H, W, C), got shape {array.shape}")
    if height < 1 or width < 1:
        raise DimensionError(f"target size {height}x{width} must be positive")
    squeeze = array.ndim == 2
    work = array[:, :, None] if squeeze else array
    if not np.issubdtype(work.dtype, np.floating):
        work = work.astype(np.float32)
    out = resize_bilinear_hwc(torch.from_numpy(np.ascontiguousarray(work)), height, width).numpy()
    return out[:, :, 0] if squeeze else out
