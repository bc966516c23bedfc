"""Pixel metrics (F1, IoU) and instance-level Panoptic Quality.

Panoptic Quality follows the COCO panoptic formulation on connected
components: predicted and reference regions match when their IoU strictly
exceeds 0.5 (which makes matches provably one-to-one), SQ is the mean IoU
of the matches, RQ the detection F-score TP / (TP + FP/2 + FN/2), and
PQ = SQ * RQ exactly.

Conventions (these vary across tools, so they are pinned here): pixel
metrics and PQ are 1.0 when both sides are empty and 0.0 when exactly one
side is; ignore masks remove pixels before anything else, including
component extraction; component connectivity defaults to 8; "mIoU"
reported for these binary tasks is the foreground IoU, with a macro
(fg+bg)/2 mode behind a flag.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DimensionError

_STRUCTURES = {
    4: np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool),
    8: np.ones((3, 3), dtype=bool),
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_masks(cls, pred, ref, ignore=None) -> "ConfusionCounts":
        pred = np.asarray(pred).astype(bool)
        ref = np.asarray(ref).astype(bool)
        if pred.shape != ref.shape:
            raise DimensionError(f"shape mismatch: pred {pred.shape} vs ref {ref.shape}")
        if ignore is not None:
            keep = ~np.asarray(ignore).astype(bool)
            if keep.shape != pred.shape:
                raise DimensionError(f"ignore shape {keep.shape} does not match {pred.shape}")
            pred, ref = pred[keep], ref[keep]
        return cls(
            tp=int(np.count_nonzero(pred & ref)),
            fp=int(np.count_nonzero(pred & ~ref)),
            fn=int(np.count_nonzero(~pred & ref)),
            tn=int(np.count_nonzero(~pred & ~ref)),
        )


@dataclass(frozen=True)
class PixelMetrics:
    f1: float
    iou: float
    counts: ConfusionCounts


def _scores(counts: ConfusionCounts) -> tuple[float, float]:
    if counts.tp + counts.fp + counts.fn == 0:
        return 1.0, 1.0  # both masks empty: vacuous agreement
    f1 = 2 * counts.tp / (2 * counts.tp + counts.fp + counts.fn)
    iou = counts.tp / (counts.tp + counts.fp + counts.fn)
    return f1, iou


def pixel_metrics(pred, ref, ignore=None) -> PixelMetrics:
    """F1 and IoU of binary masks, with ignored pixels excluded."""
    counts = ConfusionCounts.from_masks(pred, ref, ignore)
    f1, iou = _scores(counts)
    return PixelMetrics(f1=f1, iou=iou, counts=counts)


def macro_iou(pred, ref, ignore=None) -> float:
    """(foreground IoU + background IoU) / 2, for the macro-averaged mode."""
    fg = pixel_metrics(pred, ref, ignore).iou
    bg = pixel_metrics(
        ~np.asarray(pred).astype(bool), ~np.asarray(ref).astype(bool), ignore
    ).iou
    return (fg + bg) / 2.0


def connected_components(mask, connectivity: int = 8) -> tuple[np.ndarray, int]:
    """Label connected foreground regions.

    Labels are assigned in raster-scan discovery order starting at 1;
    background stays 0. Returns (labels, count).
    """
    if connectivity not in _STRUCTURES:
        raise ConfigError(f"connectivity must be 4 or 8, got {connectivity}")
    mask = np.asarray(mask).astype(bool)
    raw, count = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    if count == 0:
        return raw.astype(np.int32), 0
    # Relabel by first occurrence so discovery order is guaranteed.
    flat = raw.ravel()
    first = np.full(count + 1, flat.size, dtype=np.int64)
    nonzero = np.flatnonzero(flat)
    np.minimum.at(first, flat[nonzero], nonzero)
    order = np.argsort(first[1:], kind="stable")
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[1 + order] = np.arange(1, count + 1, dtype=np.int32)
    return remap[raw], count


@dataclass
class PanopticReport:
    """PQ = SQ x RQ plus the underlying matches for one image."""

    pq: float
    sq: float
    rq: float
    matches: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_pred: int = 0
    unmatched_ref: int = 0

    @property
    def n_matched(self) -> int:
        return len(self.matches)

    def to_json(self) -> dict:
        return {
            "pq": self.pq,
            "sq": self.sq,
            "rq": self.rq,
            "matches": [
                {"pred": p, "ref": r, "iou": iou} for p, r, iou in self.matches
            ],
            "unmatched_pred": self.unmatched_pred,
            "unmatched_ref": self.unmatched_ref,
        }


def panoptic_quality(pred_labels, ref_labels) -> PanopticReport:
    """Match labeled regions at IoU > 0.5 and compute PQ/SQ/RQ.

    The strict threshold guarantees each region matches at most once, so no
    assignment search is needed.
    """
    pred = np.asarray(pred_labels)
    ref = np.asarray(ref_labels)
    if pred.shape != ref.shape:
        raise DimensionError(f"shape mismatch: pred {pred.shape} vs ref {ref.shape}")
    n_pred = int(pred.max())
    n_ref = int(ref.max())
    if n_pred == 0 and n_ref == 0:
        return PanopticReport(pq=1.0, sq=1.0, rq=1.0)

    pred_areas = np.bincount(pred.ravel(), minlength=n_pred + 1)
    ref_areas = np.bincount(ref.ravel(), minlength=n_ref + 1)
    joint = np.bincount(
        pred.ravel().astype(np.int64) * (n_ref + 1) + ref.ravel().astype(np.int64),
        minlength=(n_pred + 1) * (n_ref + 1),
    ).reshape(n_pred + 1, n_ref + 1)

    matches = []
    matched_pred, matched_ref = set(), set()
    for p in range(1, n_pred + 1):
        for r in range(1, n_ref + 1):
            inter = joint[p, r]
            if inter == 0:
                continue
            union = pred_areas[p] + ref_areas[r] - inter
            iou = inter / union
            if iou > 0.5:
                matches.append((p, r, float(iou)))
                matched_pred.add(p)
                matched_ref.add(r)

    tp = len(matches)
    fp = n_pred - len(matched_pred)
    fn = n_ref - len(matched_ref)
    sq = float(np.mean([m[2] for m in matches])) if tp else 0.0
    rq = tp / (tp + 0.5 * fp + 0.5 * fn)
    return PanopticReport(
        pq=sq * rq,
        sq=sq,
        rq=rq,
        matches=matches,
        unmatched_pred=fp,
        unmatched_ref=fn,
    )


def panoptic_from_masks(
    pred_mask, ref_mask, ignore=None, connectivity: int = 8, min_area: int = 0
) -> PanopticReport:
    """PQ from binary masks: mask out ignored pixels, then extract components.

    ``min_area`` optionally drops tiny regions from both sides before
    matching (off by default).
    """
    pred = np.asarray(pred_mask).astype(bool)
    ref = np.asarray(ref_mask).astype(bool)
    if ignore is not None:
        keep = ~np.asarray(ignore).astype(bool)
        pred = pred & keep
        ref = ref & keep
    pred_labels, _ = connected_components(pred, connectivity)
    ref_labels, _ = connected_components(ref, connectivity)
    if min_area > 0:
        pred_labels = _drop_small(pred_labels, min_area)
        ref_labels = _drop_small(ref_labels, min_area)
    return panoptic_quality(pred_labels, ref_labels)


def _drop_small(labels: np.ndarray, min_area: int) -> np.ndarray:
    areas = np.bincount(labels.ravel())
    keep = areas >= min_area
    keep[0] = False
    old = np.flatnonzero(keep)
    remap = np.zeros(areas.size, dtype=np.int32)
    remap[old] = np.arange(1, old.size + 1, dtype=np.int32)
    return remap[labels]


def aggregate_pixel(counts: list[ConfusionCounts]) -> PixelMetrics:
    """Dataset-level metrics from pooled pixel counts."""
    if not counts:
        raise ConfigError("cannot aggregate an empty list of counts")
    pooled = ConfusionCounts(
        tp=sum(c.tp for c in counts),
        fp=sum(c.fp for c in counts),
        fn=sum(c.fn for c in counts),
        tn=sum(c.tn for c in counts),
    )
    f1, iou = _scores(pooled)
    return PixelMetrics(f1=f1, iou=iou, counts=pooled)


def aggregate_runs(values: list[float]) -> tuple[float, float]:
    """Across-run mean and sample standard deviation (0 for a single run)."""
    if not values:
        raise ConfigError("cannot aggregate an empty list of values")
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def aggregate_panoptic(reports: list[PanopticReport]) -> dict:
    """Per-image PQ/SQ/RQ averaged over images (per-map-then-mean style)."""
    if not reports:
        raise ConfigError("cannot aggregate an empty list of reports")
    return {
        "pq": float(np.mean([r.pq for r in reports])),
        "sq": float(np.mean([r.sq for r in reports])),
        "rq": float(np.mean([r.rq for r in reports])),
        "images": len(reports),
    }


def write_metrics_csv(rows: list[dict], path: str | Path) -> Path:
    """Write per-image rows plus any summary rows; column set is the union."""
    if not rows:
        raise ConfigError("no metric rows to write")
    path = Path(path)
    fields = []
    for row in rows:
        for key in row:
            if key not in fields:
                fields.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return path


def write_panoptic_json(reports: dict[str, PanopticReport], path: str | Path) -> Path:
    path = Path(path)
    payload = {name: report.to_json() for name, report in reports.items()}
    path.write_text(json.dumps(payload, indent=2))
    return path
