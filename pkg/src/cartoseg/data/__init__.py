"""Datasets, tiling, resizing, few-shot sampling, synthetic data, persistence."""

from .container import load_container, save_container
from .samples import (
    DatasetManifest,
    FewShotSpec,
    ManifestRecord,
    SegmentationSample,
    few_shot_select,
    load_manifest,
    load_sample,
    save_manifest,
)
from .synth import SYNTH_CLASSES, synth_generate, write_synth_dataset
from .tiling import TilingLayout, resize_bilinear, stitch_tiles, tile_image

__all__ = [
    "DatasetManifest",
    "FewShotSpec",
    "ManifestRecord",
    "SegmentationSample",
    "SYNTH_CLASSES",
    "TilingLayout",
    "few_shot_select",
    "load_container",
    "load_manifest",
    "load_sample",
    "resize_bilinear",
    "save_container",
    "save_manifest",
    "stitch_tiles",
    "synth_generate",
    "tile_image",
    "write_synth_dataset",
]
