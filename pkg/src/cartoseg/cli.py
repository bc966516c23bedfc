"""Command-line interface: train, evaluate, predict, viz, synth."""

from __future__ import annotations

import dataclasses
import sys
from pathlib import Path

import click

from .data.synth import SYNTH_CLASSES, synth_generate, write_synth_dataset
from .errors import CartosegError
from .run import RunConfig, configure_threads, evaluate, predict, train, visualize


@click.group()
@click.option("--threads", type=int, default=None, help="Torch thread count (test mode forces 1).")
def main(threads):
    """Few-shot segmentation toolkit for map-like imagery."""
    configure_threads(threads)


def _fail(exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(1)


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--runs", type=int, default=None,
              help="Repeated runs with consecutive seeds (default 10 when k <= 5, else 1).")
def train_cmd(config_path, seed, runs):
    """Train adapters and the probe head per a JSON run config."""
    config = RunConfig.load(config_path)
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    if runs is None:
        few = config.few_shot
        runs = 10 if (few is not None and few.k <= 5) else 1
    try:
        results = []
        for i in range(runs):
            run_cfg = config
            if runs > 1:
                run_cfg = dataclasses.replace(
                    config,
                    seed=config.seed + i,
                    out_dir=str(Path(config.out_dir) / f"run{i}"),
                )
            result = train(run_cfg)
            results.append(result)
            click.echo(
                f"run {i}: best val mIoU {result.best_val_miou:.4f} "
                f"(epoch {result.best_epoch}) -> {result.best_checkpoint}"
            )
        if runs > 1:
            import numpy as np

            mious = [r.best_val_miou for r in results]
            click.echo(f"mean best val mIoU over {runs} runs: {np.mean(mious):.4f} +- {np.std(mious, ddof=1):.4f}")
    except CartosegError as exc:
        _fail(exc)


@main.command("evaluate")
@click.argument("checkpoints", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", show_default=True)
@click.option("--panoptic", is_flag=True, help="Also compute PQ/SQ/RQ per image.")
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Directory for CSV/JSON outputs.")
def evaluate_cmd(checkpoints, manifest, split, panoptic, out_dir):
    """Evaluate one or more checkpoints on a manifest split."""
    try:
        result = evaluate(list(checkpoints), manifest, split, panoptic=panoptic, out_dir=out_dir)
    except CartosegError as exc:
        _fail(exc)
    for summary in result["runs"]:
        line = f"run {summary['run']}: F1 {summary['f1']:.4f} IoU {summary['iou']:.4f}"
        if "pq" in summary:
            line += f" PQ {summary['pq']:.4f} SQ {summary['sq']:.4f} RQ {summary['rq']:.4f}"
        click.echo(line)
    if "aggregate" in result:
        agg = result["aggregate"]
        click.echo(
            f"mean over runs: F1 {agg['f1']:.4f} +- {agg['f1_std']:.4f}, "
            f"IoU {agg['iou']:.4f} +- {agg['iou_std']:.4f}"
        )


@main.command("predict")
@click.argument("checkpoint", type=click.Path(exists=True))
@click.argument("scan", type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--frame-mask", type=click.Path(exists=True), default=None,
              help="Validity mask; pixels outside the marked area are dropped.")
def predict_cmd(checkpoint, scan, out_path, frame_mask):
    """Segment a full scan into a stitched binary PNG."""
    try:
        path = predict(checkpoint, scan, out_path, frame_mask)
    except CartosegError as exc:
        _fail(exc)
    click.echo(f"wrote {path}")


@main.command("viz")
@click.argument("checkpoint", type=click.Path(exists=True))
@click.argument("image", type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def viz_cmd(checkpoint, image, out_path):
    """Render the top-3 PCA components of the encoder features as RGB."""
    try:
        path = visualize(checkpoint, image, out_path)
    except CartosegError as exc:
        _fail(exc)
    click.echo(f"wrote {path}")


@main.command("synth")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--count", type=int, required=True)
@click.option("--class", "klass", type=click.Choice(SYNTH_CLASSES), required=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--force", is_flag=True, help="Write into an existing non-empty directory.")
def synth_cmd(seed, count, klass, out_dir, force):
    """Generate a synthetic dataset with a 7:1:2 split and a manifest."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        _fail(CartosegError(f"output directory {out} is not empty (use --force)"))
    try:
        samples = synth_generate(seed, count, klass)
        manifest = write_synth_dataset(out, samples, class_name=klass)
    except CartosegError as exc:
        _fail(exc)
    click.echo(f"wrote {count} tiles and {manifest}")


if __name__ == "__main__":
    main()
