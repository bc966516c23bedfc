"""Run configuration, training loop, evaluation, prediction and visualization.

A run is fully described by a JSON-serializable RunConfig; given the same
config and seed, checkpoints, logs and metrics are reproducible. Model
selection tracks the validation foreground IoU per epoch and keeps the
best-scoring checkpoint (earliest epoch wins ties) separately from the
last one.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import augment as aug
from .adapters import (
    AdapterConfig,
    attach,
    count_report,
    extract_adapter_tensors,
    load_adapter_tensors,
)
from .data.container import load_container, save_container
from .data.samples import (
    FewShotSpec,
    SegmentationSample,
    few_shot_select,
    load_manifest,
    load_sample,
)
from .data.tiling import resize_bilinear, stitch_tiles, tile_image
from .encoder import (
    VisionTransformer,
    base_state_tensors,
    load_base_state,
    preset_config,
)
from .errors import ConfigError, TrainingError
from .featviz import pca_fit, project_to_rgb, render_rgb_png
from .head import ProbeHead, predict_mask, probability_mask
from .metrics import (
    aggregate_panoptic,
    aggregate_pixel,
    aggregate_runs,
    panoptic_from_masks,
    pixel_metrics,
    write_metrics_csv,
    write_panoptic_json,
)
from .objective import AdamWState, LossConfig, OptimizerConfig, adamw_step, gradients, onecycle_lr, total_loss

TEST_MODE_ENV = "CARTOSEG_TEST_MODE"


def configure_threads(threads: int | None = None) -> None:
    """Apply the thread policy; test mode forces single-threaded determinism."""
    if os.environ.get(TEST_MODE_ENV) == "1":
        torch.set_num_threads(1)
    elif threads is not None:
        torch.set_num_threads(max(1, threads))


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce one training/evaluation run."""

    manifest: str = ""
    out_dir: str = "runs/out"
    preset: str = "tiny"
    weights: str | None = None
    in_channels: int = 3
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    input_scale: float = 3.0
    epochs: int | None = None  # None: 300 few-shot, 30 once >10% of the full split
    batch_size: int = 4
    seed: int = 0
    few_shot: FewShotSpec | None = None
    augment: bool = True
    threshold: float = 0.5
    classify_first: bool = False
    tile_size: int = 448

    def to_dict(self) -> dict:
        def convert(value):
            if dataclasses.is_dataclass(value) and not isinstance(value, type):
                return {k: convert(v) for k, v in dataclasses.asdict(value).items()}
            if isinstance(value, tuple):
                return list(value)
            return value

        return {f.name: convert(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        data = dict(payload)
        if data.get("adapter") is not None:
            a = dict(data["adapter"])
            a["targets"] = tuple(a.get("targets", ("q", "k", "v")))
            data["adapter"] = AdapterConfig(**a)
        if data.get("loss") is not None:
            data["loss"] = LossConfig(**data["loss"])
        if data.get("optimizer") is not None:
            o = dict(data["optimizer"])
            o["betas"] = tuple(o.get("betas", (0.9, 0.999)))
            data["optimizer"] = OptimizerConfig(**o)
        if data.get("few_shot") is not None:
            data["few_shot"] = FewShotSpec(**data["few_shot"])
        return cls(**data)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def scaled_input_size(extent: int, scale: float, patch: int) -> int:
    """Nearest patch-multiple of extent * scale (at least one patch)."""
    return max(patch, int(round(extent * scale / patch)) * patch)


def resolve_epochs(config: RunConfig, n_train: int, n_full: int) -> int:
    """300 epochs in the few-shot regime, 30 from the 10% subset upward;
    explicit config wins. The boundary rounds so that a "10% split" whose
    tile count was itself rounded down still gets the large-data budget."""
    if config.epochs is not None:
        return config.epochs
    return 30 if n_train >= round(0.10 * n_full) else 300


def build_model(config: RunConfig, image_size: int) -> tuple[VisionTransformer, ProbeHead]:
    enc_cfg = preset_config(config.preset, in_channels=config.in_channels)
    model = VisionTransformer(enc_cfg, image_size=image_size)
    if config.weights:
        tensors, _ = load_container(config.weights)
        load_base_state(model, {k: torch.from_numpy(v) for k, v in tensors.items()})
    attach(config.adapter, model)
    head = ProbeHead(enc_cfg.embed_dim, threshold=config.threshold)
    return model, head


def save_checkpoint(
    path: str | Path,
    model: VisionTransformer,
    head: ProbeHead,
    config: RunConfig,
    image_size: int,
    epoch: int,
    val_miou: float,
    opt_state: AdamWState | None = None,
) -> Path:
    tensors = {k: v.detach().cpu().numpy() for k, v in base_state_tensors(model).items()}
    tensors.update({k: v.cpu().numpy() for k, v in extract_adapter_tensors(model).items()})
    tensors["head.w"] = head.w.detach().cpu().numpy()
    tensors["head.b"] = head.b.detach().cpu().numpy().reshape(())
    if opt_state is not None:
        for i, (m, v) in enumerate(zip(opt_state.m, opt_state.v)):
            tensors[f"opt.{i}.m"] = m.cpu().numpy()
            tensors[f"opt.{i}.v"] = v.cpu().numpy()
    meta = {
        "config": config.to_dict(),
        "image_size": image_size,
        "epoch": epoch,
        "val_miou": val_miou,
        "opt_step": opt_state.step if opt_state is not None else 0,
    }
    return save_container(path, tensors, meta)


def load_checkpoint(path: str | Path) -> tuple[VisionTransformer, ProbeHead, dict]:
    """Rebuild the adapted model and head saved by ``save_checkpoint``."""
    tensors, meta = load_container(path)
    config = RunConfig.from_dict(meta["config"])
    enc_cfg = preset_config(config.preset, in_channels=config.in_channels)
    model = VisionTransformer(enc_cfg, image_size=meta["image_size"])
    load_base_state(model, {k: torch.from_numpy(v) for k, v in tensors.items() if not k.startswith(("adapter.", "head.", "opt."))})
    attach(config.adapter, model)
    if config.adapter.method != "none":
        load_adapter_tensors(model, {k: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("adapter.")})
    head = ProbeHead(enc_cfg.embed_dim, threshold=config.threshold)
    with torch.no_grad():
        head.w.copy_(torch.from_numpy(tensors["head.w"]))
        head.b.copy_(torch.from_numpy(tensors["head.b"].reshape(())))
    model.eval()
    head.eval()
    return model, head, meta


def _batch_tensors(
    samples: list[SegmentationSample], in_h: int, in_w: int
) -> tuple[torch.Tensor, torch.Tensor]:
    images = np.stack([resize_bilinear(s.image, in_h, in_w) for s in samples])
    masks = np.stack([s.mask for s in samples]).astype(np.float32)
    return torch.from_numpy(images), torch.from_numpy(masks)


def _infer_probs(
    model: VisionTransformer,
    head: ProbeHead,
    sample: SegmentationSample,
    in_h: int,
    in_w: int,
    classify_first: bool,
) -> np.ndarray:
    model.eval()
    head.eval()
    with torch.no_grad():
        image = torch.from_numpy(resize_bilinear(sample.image, in_h, in_w))
        grid = model(image)
        probs = probability_mask(grid, head, sample.mask.shape[0], sample.mask.shape[1], classify_first)
    return probs.numpy()


def _validation_miou(model, head, samples, in_h, in_w, config) -> float:
    ious = []
    for s in samples:
        probs = _infer_probs(model, head, s, in_h, in_w, config.classify_first)
        pred = predict_mask(probs, config.threshold)
        ious.append(pixel_metrics(pred, s.mask, s.ignore).iou)
    return float(np.mean(ious))


@dataclass
class TrainResult:
    out_dir: Path
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    best_epoch: int
    best_val_miou: float
    history: list[dict]


def train(config: RunConfig) -> TrainResult:
    """Train adapters + probe head per the run config; returns artifact paths.

    Raises ConfigError before any heavy work for bad inputs, TrainingError
    with a diagnostic if the loss turns non-finite.
    """
    configure_threads()
    manifest = load_manifest(config.manifest)
    full_train = manifest.split("train")
    if config.few_shot is not None:
        train_records = few_shot_select(manifest, config.few_shot)
    else:
        train_records = list(full_train)
    val_records = manifest.split("val")
    if not train_records or not val_records:
        raise ConfigError("manifest must provide non-empty train and val splits")

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(out_dir / "config.json")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    train_samples = [load_sample(r, manifest.base_dir) for r in train_records]
    val_samples = [load_sample(r, manifest.base_dir) for r in val_records]

    tile_h, tile_w = train_samples[0].mask.shape
    enc_cfg = preset_config(config.preset, in_channels=config.in_channels)
    in_h = scaled_input_size(tile_h, config.input_scale, enc_cfg.patch_size)
    in_w = scaled_input_size(tile_w, config.input_scale, enc_cfg.patch_size)
    model, head = build_model(config, image_size=in_h)

    params = [p for p in model.parameters() if p.requires_grad] + list(head.parameters())
    report = count_report(config.adapter, enc_cfg)
    epochs = resolve_epochs(config, len(train_records), len(full_train))
    steps_per_epoch = math.ceil(len(train_samples) / config.batch_size)
    opt_cfg = replace(config.optimizer, total_steps=max(2, epochs * steps_per_epoch))
    state = AdamWState.init(params)

    history = []
    best_miou = -1.0
    best_epoch = -1
    global_step = 0
    for epoch in range(epochs):
        model.train()
        head.train()
        order = rng.permutation(len(train_samples))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train_samples[i] for i in order[start: start + config.batch_size]]
            if config.augment:
                batch = [aug.apply(aug.sample_d4(rng), s) for s in batch]
            images, masks = _batch_tensors(batch, in_h, in_w)
            grid = model(images)
            probs = probability_mask(grid, head, tile_h, tile_w, config.classify_first)
            loss = total_loss(probs, masks, config.loss)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss.item()!r} at epoch {epoch} step {global_step}; "
                    f"last lr {onecycle_lr(min(global_step, opt_cfg.total_steps), opt_cfg):.3g}"
                )
            grads = gradients(loss, params)
            lr = onecycle_lr(global_step, opt_cfg)
            adamw_step(params, grads, state, lr, opt_cfg.betas, opt_cfg.weight_decay)
            global_step += 1
            losses.append(float(loss.detach()))

        val_miou = _validation_miou(model, head, val_samples, in_h, in_w, config)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_miou": val_miou,
                "lr": onecycle_lr(min(global_step, opt_cfg.total_steps), opt_cfg),
            }
        )
        if val_miou > best_miou:
            best_miou = val_miou
            best_epoch = epoch
            save_checkpoint(
                out_dir / "best.ckpt", model, head, config, in_h, epoch, val_miou, state
            )

    last = save_checkpoint(
        out_dir / "last.ckpt", model, head, config, in_h, epochs - 1,
        history[-1]["val_miou"], state,
    )
    log_path = out_dir / "training_log.json"
    log_path.write_text(
        json.dumps(
            {
                "history": history,
                "best_epoch": best_epoch,
                "best_val_miou": best_miou,
                "epochs": epochs,
                "steps_per_epoch": steps_per_epoch,
                "trainable_parameters": report,
            },
            indent=2,
        )
    )
    return TrainResult(
        out_dir=out_dir,
        best_checkpoint=out_dir / "best.ckpt",
        last_checkpoint=last,
        log_path=log_path,
        best_epoch=best_epoch,
        best_val_miou=best_miou,
        history=history,
    )


def evaluate(
    checkpoints: list[str | Path],
    manifest_path: str | Path,
    split: str = "test",
    panoptic: bool = False,
    out_dir: str | Path | None = None,
    connectivity: int = 8,
) -> dict:
    """Per-image pixel metrics (plus PQ on request) for one or more runs.

    With several checkpoints the summary additionally reports the across-run
    mean and sample standard deviation of each headline metric.
    """
    configure_threads()
    manifest = load_manifest(manifest_path)
    records = manifest.split(split)
    if not records:
        raise ConfigError(f"split {split!r} of {manifest_path} is empty")
    if not checkpoints:
        raise ConfigError("need at least one checkpoint to evaluate")

    rows = []
    run_summaries = []
    panoptic_reports = {}
    for run_idx, ckpt in enumerate(checkpoints):
        model, head, meta = load_checkpoint(ckpt)
        config = RunConfig.from_dict(meta["config"])
        counts = []
        reports = []
        for record in records:
            sample = load_sample(record, manifest.base_dir)
            in_h = scaled_input_size(sample.mask.shape[0], config.input_scale, model.config.patch_size)
            in_w = scaled_input_size(sample.mask.shape[1], config.input_scale, model.config.patch_size)
            probs = _infer_probs(model, head, sample, in_h, in_w, config.classify_first)
            pred = predict_mask(probs, config.threshold)
            pm = pixel_metrics(pred, sample.mask, sample.ignore)
            counts.append(pm.counts)
            row = {"run": run_idx, "image": record.id, "f1": pm.f1, "iou": pm.iou}
            if panoptic:
                pq = panoptic_from_masks(pred, sample.mask, sample.ignore, connectivity)
                reports.append(pq)
                panoptic_reports[f"run{run_idx}/{record.id}"] = pq
                row.update({"pq": pq.pq, "sq": pq.sq, "rq": pq.rq})
            rows.append(row)
        pooled = aggregate_pixel(counts)
        summary = {
            "run": run_idx,
            "image": "__summary__",
            "f1": pooled.f1,
            "iou": pooled.iou,
        }
        if panoptic and reports:
            summary.update(aggregate_panoptic(reports))
            summary.pop("images", None)
        rows.append(summary)
        run_summaries.append(summary)

    result = {"rows": rows, "runs": run_summaries}
    if len(run_summaries) > 1:
        agg_row = {"run": "all", "image": "__mean_std__"}
        for key in ("f1", "iou", "pq", "sq", "rq"):
            values = [s[key] for s in run_summaries if key in s]
            if values:
                mean, std = aggregate_runs(values)
                agg_row[key] = mean
                agg_row[f"{key}_std"] = std
        rows.append(agg_row)
        result["aggregate"] = agg_row

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(rows, out / "metrics.csv")
        if panoptic_reports:
            write_panoptic_json(panoptic_reports, out / "panoptic.json")
    return result


def predict(
    checkpoint: str | Path,
    scan_path: str | Path,
    out_path: str | Path,
    frame_mask_path: str | Path | None = None,
) -> Path:
    """Segment a full scan: tile, run the model per tile, stitch, save a PNG."""
    configure_threads()
    model, head, meta = load_checkpoint(checkpoint)
    config = RunConfig.from_dict(meta["config"])
    raw = np.asarray(Image.open(scan_path))
    if raw.ndim == 2:
        raw = raw[:, :, None]
    scan = raw.astype(np.float32) / 255.0
    frame = None
    if frame_mask_path is not None:
        # Frame masks mark the relevant area; outside pixels are ignored.
        frame = (np.asarray(Image.open(frame_mask_path)) <= 127).astype(np.uint8)

    tiles, layout = tile_image(scan, config.tile_size, source_id=str(scan_path))
    t = config.tile_size
    in_h = scaled_input_size(t, config.input_scale, model.config.patch_size)
    outputs = []
    for tile in tiles:
        probs = _infer_probs(model, head, tile, in_h, in_h, config.classify_first)
        outputs.append(probs)
    stitched = stitch_tiles(outputs, layout)
    mask = predict_mask(stitched, config.threshold)
    if frame is not None:
        mask = mask & (frame == 0).astype(np.uint8)
    out_path = Path(out_path)
    Image.fromarray((mask * 255).astype(np.uint8)).save(out_path)
    return out_path


def visualize(
    checkpoint: str | Path, image_path: str | Path, out_path: str | Path
) -> Path:
    """Render the top-3 principal components of the encoder features as RGB."""
    configure_threads()
    model, _, _ = load_checkpoint(checkpoint)
    raw = np.asarray(Image.open(image_path))
    if raw.ndim == 2:
        raw = raw[:, :, None]
    image = raw.astype(np.float32) / 255.0
    p = model.config.patch_size
    h = max(p, round(image.shape[0] / p) * p)
    w = max(p, round(image.shape[1] / p) * p)
    image = resize_bilinear(image, h, w)
    grid = model.encode(torch.from_numpy(image)).numpy()
    basis = pca_fit(grid.reshape(-1, grid.shape[-1]))
    rgb = project_to_rgb(grid, basis)
    return render_rgb_png(rgb, out_path, out_size=(raw.shape[0], raw.shape[1]))


def pretrain_proxy(
    model: VisionTransformer,
    samples: list[SegmentationSample],
    steps: int,
    in_h: int,
    in_w: int,
    seed: int = 0,
    batch_size: int = 4,
    lr: float = 1e-3,
) -> VisionTransformer:
    """Self-supervised warm-up: predict per-patch mean color from features.

    Gives a from-scratch toy encoder non-random (but task-agnostic) weights
    via a throwaway linear decoder; all encoder parameters train.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    p = model.config.patch_size
    decoder = torch.nn.Linear(model.config.embed_dim, model.config.in_channels)
    for param in model.parameters():
        param.requires_grad_(True)
    params = list(model.parameters()) + list(decoder.parameters())
    state = AdamWState.init(params)
    model.train()
    for _ in range(steps):
        idx = rng.integers(0, len(samples), size=batch_size)
        images, _ = _batch_tensors([samples[i] for i in idx], in_h, in_w)
        grid = model(images)
        b, gh, gw, _ = grid.shape
        target = images.reshape(b, gh, p, gw, p, -1).mean(dim=(2, 4))
        loss = ((decoder(grid) - target) ** 2).mean()
        grads = gradients(loss, params)
        adamw_step(params, grads, state, lr, weight_decay=0.0)
    model.eval()
    return model
