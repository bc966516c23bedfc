"""Deterministic synthetic map tiles for desk-scale training and testing.

Two classes mimic the structure of scanned-map segmentation targets:

* ``linear-features``: thin dashed polylines (railway-like) drawn over
  clutter of solid contour curves and text-like glyph marks,
* ``areal-features``: hatched star-convex polygons (vineyard-like) whose
  mask is the exact filled region.

Foreground and clutter share the same ink color on purpose: separating
them requires shape and context, not color thresholds. Masks are the exact
rasterizations of the foreground geometry, every sample keeps its
foreground fraction inside [0.01, 0.5], and generation is a pure function
of (seed, index).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from ..errors import ConfigError
from .samples import DatasetManifest, ManifestRecord, SegmentationSample, save_manifest

SYNTH_CLASSES = ("linear-features", "areal-features")

_PAPER = np.array([0.92, 0.89, 0.80], dtype=np.float32)
_INK = np.array([0.21, 0.18, 0.15], dtype=np.float32)
_WASH = np.array([0.78, 0.84, 0.68], dtype=np.float32)  # areal tint under the hatching


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Parchment-like canvas: base tone, low-frequency blotches, fine grain."""
    canvas = np.ones((size, size, 3), dtype=np.float32) * _PAPER
    coarse = rng.normal(0.0, 1.0, (size // 8 + 1, size // 8 + 1))
    coarse = ndimage.zoom(ndimage.gaussian_filter(coarse, 1.5), 8, order=1)[:size, :size]
    canvas += (0.03 * coarse)[:, :, None].astype(np.float32)
    canvas += rng.normal(0.0, 0.012, (size, size, 1)).astype(np.float32)
    return np.clip(canvas, 0.0, 1.0)


def _stamp_points(size: int, rows: np.ndarray, cols: np.ndarray, radius: float) -> np.ndarray:
    """Boolean raster of discs of the given radius around each point."""
    out = np.zeros((size, size), dtype=bool)
    reach = int(np.ceil(radius))
    dr, dc = np.mgrid[-reach: reach + 1, -reach: reach + 1]
    keep = dr * dr + dc * dc <= radius * radius
    offsets = np.stack([dr[keep], dc[keep]], axis=1)
    rr = (np.round(rows)[:, None] + offsets[None, :, 0]).astype(np.int64)
    cc = (np.round(cols)[:, None] + offsets[None, :, 1]).astype(np.int64)
    inside = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size)
    out[rr[inside], cc[inside]] = True
    return out


def _polyline_raster(
    size: int,
    points: np.ndarray,
    width: float,
    dash: tuple[float, float] | None = None,
) -> np.ndarray:
    """Rasterize a polyline with round caps, optionally dashed (on, off)."""
    rows, cols, dists = [], [], []
    travelled = 0.0
    for (r0, c0), (r1, c1) in zip(points[:-1], points[1:]):
        seg = float(np.hypot(r1 - r0, c1 - c0))
        if seg == 0.0:
            continue
        n = max(2, int(seg / 0.3))
        t = np.linspace(0.0, 1.0, n)
        rows.append(r0 + t * (r1 - r0))
        cols.append(c0 + t * (c1 - c0))
        dists.append(travelled + t * seg)
        travelled += seg
    if not rows:
        return np.zeros((size, size), dtype=bool)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    dists = np.concatenate(dists)
    if dash is not None:
        on, off = dash
        keep = np.mod(dists, on + off) < on
        rows, cols = rows[keep], cols[keep]
        if rows.size == 0:
            return np.zeros((size, size), dtype=bool)
    return _stamp_points(size, rows, cols, width / 2.0)


def _wavy_curve(rng: np.random.Generator, size: int) -> np.ndarray:
    """Control points of a smooth contour-like curve crossing the tile."""
    horizontal = rng.random() < 0.5
    base = rng.uniform(0.1, 0.9) * size
    xs = np.linspace(-0.05 * size, 1.05 * size, 24)
    wave = np.zeros_like(xs)
    for k in range(1, 4):
        wave += rng.uniform(0.0, size * 0.04 / k) * np.sin(
            2 * np.pi * k * xs / size + rng.uniform(0, 2 * np.pi)
        )
    ys = base + wave
    pts = np.stack([ys, xs], axis=1)
    return pts if horizontal else pts[:, ::-1]


def _glyph_cluster(rng: np.random.Generator, size: int) -> np.ndarray:
    """Text-like mark: a few short dense strokes around a spot."""
    cr = rng.uniform(0.08, 0.92) * size
    cc = rng.uniform(0.08, 0.92) * size
    raster = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(2, 5))):
        ang = rng.uniform(0, np.pi)
        length = rng.uniform(3.0, 7.0)
        jr = cr + rng.uniform(-4, 4)
        jc = cc + rng.uniform(-4, 4)
        p0 = np.array([jr - np.sin(ang) * length / 2, jc - np.cos(ang) * length / 2])
        p1 = np.array([jr + np.sin(ang) * length / 2, jc + np.cos(ang) * length / 2])
        raster |= _polyline_raster(size, np.stack([p0, p1]), width=2.0)
    return raster


def _dashed_line(rng: np.random.Generator, size: int) -> np.ndarray:
    """A long, gently bent dashed polyline crossing the whole tile."""
    ang = rng.uniform(0, np.pi)
    cr = rng.uniform(0.2, 0.8) * size
    cc = rng.uniform(0.2, 0.8) * size
    direction = np.array([np.sin(ang), np.cos(ang)])
    half = 0.8 * size
    t = np.linspace(-half, half, 7)
    normal = np.array([-direction[1], direction[0]])
    bend = rng.uniform(-0.02, 0.02) * size
    pts = (
        np.array([cr, cc])[None, :]
        + t[:, None] * direction[None, :]
        + (bend * np.sin(np.pi * t / half))[:, None] * normal[None, :]
    )
    on = rng.uniform(9.0, 12.0)
    off = rng.uniform(5.0, 7.0)
    return _polyline_raster(size, pts, width=4.5, dash=(on, off))


def _star_polygon(rng: np.random.Generator, size: int) -> np.ndarray:
    """Filled star-convex region with a smooth random boundary."""
    target = rng.uniform(0.06, 0.28)
    r0 = size * np.sqrt(target / np.pi)
    cr = rng.uniform(0.3, 0.7) * size
    cc = rng.uniform(0.3, 0.7) * size
    amp = rng.uniform(0.05, 0.2, size=3)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    rows, cols = np.mgrid[0:size, 0:size]
    theta = np.arctan2(rows - cr, cols - cc)
    rho = np.hypot(rows - cr, cols - cc)
    wobble = np.ones_like(theta)
    for k, (a, p) in enumerate(zip(amp, phase), start=2):
        wobble += a * np.cos(k * theta + p)
    return rho <= r0 * wobble


def _render(canvas: np.ndarray, raster: np.ndarray, rng: np.random.Generator) -> None:
    """Ink a boolean raster onto the canvas with slight tone variation."""
    tone = _INK * rng.uniform(0.9, 1.1)
    canvas[raster] = np.clip(tone, 0.0, 1.0).astype(np.float32)


def _generate_one(
    seed: int, index: int, klass: str, size: int, with_foreground: bool = True
) -> SegmentationSample:
    rng = np.random.default_rng([seed, index])
    canvas = _background(rng, size)

    # Contour-like curves clutter both classes; text-like glyph noise only
    # accompanies linear features (it is what makes them hard to tell apart).
    clutter = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(4, 8))):
        clutter |= _polyline_raster(size, _wavy_curve(rng, size), width=1.8)
    if klass == "linear-features":
        for _ in range(int(rng.integers(6, 13))):
            clutter |= _glyph_cluster(rng, size)

    if not with_foreground:
        _render(canvas, clutter, rng)
        return SegmentationSample(
            image=canvas,
            mask=np.zeros((size, size), dtype=np.uint8),
            source_id=f"synth-background-{seed}-{index:04d}",
        ).validate()

    if klass == "linear-features":
        fg = np.zeros((size, size), dtype=bool)
        fg |= _dashed_line(rng, size)
        fg |= _dashed_line(rng, size)
        while fg.mean() < 0.012 and fg.mean() < 0.5:
            fg |= _dashed_line(rng, size)
    elif klass == "areal-features":
        fg = _star_polygon(rng, size)
        while fg.mean() < 0.012:
            fg = _star_polygon(rng, size)
    else:
        raise ConfigError(f"unknown synthetic class {klass!r}; choose from {SYNTH_CLASSES}")

    _render(canvas, clutter & ~fg, rng)
    if klass == "linear-features":
        _render(canvas, fg, rng)
    else:
        wash = rng.uniform(0.65, 0.9)
        canvas[fg] = (1 - wash) * canvas[fg] + wash * _WASH
        rows, cols = np.mgrid[0:size, 0:size]
        hatch = fg & (np.mod(rows + cols, 7) < 2)
        outline = fg & ~ndimage.binary_erosion(fg, iterations=2)
        _render(canvas, hatch | outline, rng)

    return SegmentationSample(
        image=canvas,
        mask=fg.astype(np.uint8),
        source_id=f"synth-{klass}-{seed}-{index:04d}",
    ).validate()


def synth_generate(
    seed: int, count: int, klass: str, size: int = 224, with_foreground: bool = True
) -> list[SegmentationSample]:
    """Generate ``count`` synthetic tiles; bit-identical for a fixed seed.

    ``with_foreground=False`` emits clutter-only tiles with empty masks
    (the in-distribution "all background" case used by sanity checks); the
    foreground-fraction guarantee applies only to the default path.
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    if klass not in SYNTH_CLASSES:
        raise ConfigError(f"unknown synthetic class {klass!r}; choose from {SYNTH_CLASSES}")
    return [_generate_one(seed, i, klass, size, with_foreground) for i in range(count)]


def _split_counts(count: int, split: tuple) -> tuple[int, int, int]:
    if all(isinstance(s, int) for s in split):
        if sum(split) != count:
            raise ConfigError(f"explicit split {split} does not sum to count {count}")
        return tuple(split)
    n_train = int(round(count * split[0]))
    n_val = max(1, int(round(count * split[1]))) if count >= 3 else 0
    n_train = max(1, min(n_train, count - n_val - 1))
    return n_train, n_val, count - n_train - n_val


def write_synth_dataset(
    out_dir: str | Path,
    samples: list[SegmentationSample],
    class_name: str,
    split: tuple = (0.7, 0.1, 0.2),
) -> Path:
    """Write PNG pairs and a manifest with a train/val/test split.

    ``split`` is either three ratios (default 7:1:2) or three explicit
    integer counts. Samples are assigned to roles in order.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    n_train, n_val, n_test = _split_counts(len(samples), split)
    records = []
    for i, sample in enumerate(samples):
        role = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        stem = f"{sample.source_id or f'tile-{i:04d}'}"
        image_rel = f"images/{stem}.png"
        mask_rel = f"masks/{stem}.png"
        Image.fromarray(np.round(sample.image * 255).astype(np.uint8)).save(out / image_rel)
        Image.fromarray((sample.mask * 255).astype(np.uint8)).save(out / mask_rel)
        records.append(ManifestRecord(id=stem, image=image_rel, mask=mask_rel, role=role))
    manifest = DatasetManifest(class_name=class_name, records=records, base_dir=out)
    return save_manifest(manifest, out / "manifest.json")
