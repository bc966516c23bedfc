"""Segmentation samples, dataset manifests, and few-shot selection.

Raster conventions: images are (H, W, C) float32 in [0, 1]; masks are
(H, W) uint8 with values in {0, 1}; the optional ignore mask marks pixels
excluded from training and evaluation (1 = excluded). On disk, images are
8-bit PNG, masks single-channel PNG binarized at >127.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ConfigError, DimensionError

ROLES = ("train", "val", "test")


@dataclass
class SegmentationSample:
    """One image tile with its annotation, the unit of training and evaluation."""

    image: np.ndarray
    mask: np.ndarray
    ignore: np.ndarray | None = None
    source_id: str = ""
    origin: tuple[int, int] = (0, 0)

    def validate(self) -> "SegmentationSample":
        if self.image.ndim != 3:
            raise DimensionError(f"image must be (H, W, C), got shape {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise DimensionError(
                f"mask shape {self.mask.shape} does not match image {self.image.shape[:2]}"
            )
        if self.ignore is not None and self.ignore.shape != self.mask.shape:
            raise DimensionError(
                f"ignore shape {self.ignore.shape} does not match mask {self.mask.shape}"
            )
        if not np.isin(self.mask, (0, 1)).all():
            raise DimensionError("mask values must be in {0, 1}")
        return self


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    image: str
    mask: str
    role: str
    ignore: str | None = None


@dataclass
class DatasetManifest:
    class_name: str
    records: list[ManifestRecord]
    base_dir: Path = field(default_factory=Path)

    def split(self, role: str) -> list[ManifestRecord]:
        if role not in ROLES:
            raise ConfigError(f"unknown split {role!r}; choose from {ROLES}")
        return [r for r in self.records if r.role == role]

    def digest(self) -> str:
        """Stable content digest over record identity, used to key sampling."""
        payload = json.dumps(
            [[r.id, r.image, r.mask, r.role] for r in self.records], sort_keys=True
        )
        return hashlib.sha256(payload.encode()).hexdigest()


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    payload = {
        "class_name": manifest.class_name,
        "samples": [
            {k: v for k, v in
             dict(id=r.id, image=r.image, mask=r.mask, role=r.role, ignore=r.ignore).items()
             if v is not None}
            for r in manifest.records
        ],
    }
    path.write_text(json.dumps(payload, indent=2))
    return path


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    payload = json.loads(path.read_text())
    records = []
    seen = set()
    for entry in payload["samples"]:
        record = ManifestRecord(
            id=entry["id"],
            image=entry["image"],
            mask=entry["mask"],
            role=entry["role"],
            ignore=entry.get("ignore"),
        )
        if record.role not in ROLES:
            raise ConfigError(f"sample {record.id!r} has unknown role {record.role!r}")
        if record.id in seen:
            raise ConfigError(f"duplicate sample id {record.id!r}; splits must be disjoint")
        seen.add(record.id)
        records.append(record)
    manifest = DatasetManifest(payload["class_name"], records, base_dir=path.parent)
    if check_files:
        for r in manifest.records:
            for rel in (r.image, r.mask, r.ignore):
                if rel is not None and not (manifest.base_dir / rel).exists():
                    raise ConfigError(f"sample {r.id!r} references missing file {rel!r}")
    return manifest


def _load_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path))


def load_sample(record: ManifestRecord, base_dir: str | Path) -> SegmentationSample:
    """Read one manifest record from disk into the in-memory convention."""
    base = Path(base_dir)
    raw = _load_png(base / record.image)
    if raw.ndim == 2:
        raw = raw[:, :, None]
    image = raw.astype(np.float32) / 255.0
    mask = (_load_png(base / record.mask) > 127).astype(np.uint8)
    ignore = None
    if record.ignore is not None:
        ignore = (_load_png(base / record.ignore) > 127).astype(np.uint8)
    return SegmentationSample(image, mask, ignore, source_id=record.id).validate()


@dataclass(frozen=True)
class FewShotSpec:
    """k-shot training-subset selection, keyed by (manifest digest, seed)."""

    k: int
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"shot count k must be >= 1, got {self.k}")


def few_shot_select(
    manifest: DatasetManifest,
    spec: FewShotSpec,
    pinned_ids: list[str] | None = None,
) -> list[ManifestRecord]:
    """Deterministic k-subset of the train split, in manifest order.

    ``pinned_ids`` bypasses sampling to reproduce an externally published
    shot set exactly.
    """
    train = manifest.split("train")
    if spec.k > len(train):
        raise ConfigError(f"k={spec.k} exceeds the {len(train)} available training samples")
    if pinned_ids is not None:
        if len(pinned_ids) != spec.k:
            raise ConfigError(f"pinned id list has {len(pinned_ids)} entries, expected k={spec.k}")
        by_id = {r.id: r for r in train}
        missing = [i for i in pinned_ids if i not in by_id]
        if missing:
            raise ConfigError(f"pinned ids not in train split: {missing}")
        chosen = set(pinned_ids)
        return [r for r in train if r.id in chosen]
    if spec.k == len(train):
        return list(train)
    digest_words = np.frombuffer(bytes.fromhex(manifest.digest()), dtype=np.uint32)
    rng = np.random.default_rng([spec.seed, *digest_words.tolist()])
    picked = set(rng.choice(len(train), size=spec.k, replace=False).tolist())
    return [r for i, r in enumerate(train) if i in picked]
