"""Command-line surface: train, eval, predict, overlay, params, synth, ablate.

Exit codes: 0 success, 2 usage error, 3 config/compatibility error,
4 numeric divergence during training.
"""

import dataclasses
import functools
import json
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from . import data, engine
from .errors import (CheckpointError, ConfigurationError, DivergenceError,
                     ManifestError, ShapeError, ValidationError)
from .model import (ModelConfig, PHASE_TRAIN, count_parameters, load_checkpoint,
                    strip_for_test)

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DIVERGED = 4

GT_COLOR = (0, 255, 0)      # ground truth only
PRED_COLOR = (255, 0, 0)    # prediction only
MATCH_COLOR = (255, 255, 0)  # both agree


def _fail(code, message):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except DivergenceError as err:
            _fail(EXIT_DIVERGED, err)
        except (ConfigurationError, CheckpointError, ShapeError) as err:
            _fail(EXIT_CONFIG, err)
        except (ManifestError, ValidationError, json.JSONDecodeError, OSError) as err:
            _fail(EXIT_USAGE, err)
    return wrapper


@click.group()
def main():
    """High-resolution vessel segmentation from low-resolution input."""


def _parse_ablation(text):
    flags = {}
    for item in text.split(","):
        if not item:
            continue
        key, _, value = item.partition("=")
        key = key.strip().lower()
        value = value.strip().lower()
        if key not in ("asr", "ufd", "fim"):
            raise ConfigurationError(f"unknown ablation flag {key!r}")
        if value in ("on", "1", "true"):
            flags[key] = True
        elif value in ("off", "0", "false"):
            flags[key] = False
        else:
            raise ConfigurationError(f"ablation value for {key!r} must be on/off, got {value!r}")
    return flags


def _prepare_out_dir(path, force):
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise ManifestError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_train_config(path):
    cfg_dict = json.loads(Path(path).read_text())
    return engine.TrainConfig.from_dict(cfg_dict)


def _write_metrics(report, out_dir):
    (out_dir / "metrics.json").write_text(report.to_json())
    (out_dir / "metrics.csv").write_text(report.to_csv())


@main.command("train")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="TrainConfig JSON file.")
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Dataset manifest JSON file.")
@click.option("--out", "out_path", required=True, type=click.Path(file_okay=False),
              help="Run directory.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--ablation", "ablation_text", default=None,
              help="Flag overrides, e.g. 'fim=off' or 'asr=on,fim=off'.")
@click.option("--force", is_flag=True, help="Overwrite a non-empty run directory.")
@_guarded
def cmd_train(config_path, manifest_path, out_path, seed, ablation_text, force):
    """Train on the manifest's train split and write a run directory."""
    cfg = _load_train_config(config_path)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    if ablation_text:
        overrides = _parse_ablation(ablation_text)
        cfg = dataclasses.replace(
            cfg, ablation=engine.AblationFlags(**{**cfg.ablation.to_dict(), **overrides}))
    manifest = data.load_manifest(manifest_path)
    out = _prepare_out_dir(out_path, force)
    model = engine.build_from_train_config(cfg)
    result, _ = engine.train(model, manifest, cfg, out_dir=out)
    if manifest.split_entries("test"):
        report = engine.evaluate(result.best_path or result.model, manifest, split="test")
        _write_metrics(report, out)
    click.echo(f"run complete: {out}")


@main.command("eval")
@click.option("--checkpoint", "ckpt_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--split", default="test", type=click.Choice(["train", "test"]))
@click.option("--out", "out_path", required=True, type=click.Path(file_okay=False))
@_guarded
def cmd_eval(ckpt_path, manifest_path, split, out_path):
    """Score a checkpoint on one split and write metrics.json / metrics.csv."""
    manifest = data.load_manifest(manifest_path)
    report = engine.evaluate(ckpt_path, manifest, split=split)
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    _write_metrics(report, out)
    click.echo(report.to_csv())


@main.command("predict")
@click.option("--checkpoint", "ckpt_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(file_okay=False))
@click.argument("images", nargs=-1, required=True,
                type=click.Path(exists=True, dir_okay=False))
@_guarded
def cmd_predict(ckpt_path, out_path, images):
    """Segment images; writes an HR binary mask PNG and a 16-bit probability PNG each."""
    model = load_checkpoint(ckpt_path)
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    for image_path in images:
        arr = data.load_image(image_path, model.config.in_channels)
        probs = engine.predict_probs(model, arr)
        vessel = probs[1]
        stem = Path(image_path).stem
        mask = ((vessel >= 0.5).astype(np.uint8)) * 255
        Image.fromarray(mask, mode="L").save(out / f"{stem}_mask.png")
        prob16 = np.round(np.clip(vessel, 0.0, 1.0) * 65535.0).astype(np.uint16)
        Image.fromarray(prob16).save(out / f"{stem}_prob.png")
        click.echo(f"{image_path} -> {out / (stem + '_mask.png')}")


def render_overlay(pred_mask, gt_mask, background=None):
    """Color-coded comparison: GT-only green, pred-only red, both yellow."""
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask extents disagree: {pred.shape} vs {gt.shape}")
    if background is None:
        canvas = np.zeros(pred.shape + (3,), dtype=np.uint8)
    else:
        canvas = np.asarray(background, dtype=np.uint8).copy()
        if canvas.shape[:2] != pred.shape:
            raise ShapeError(
                f"background extents {canvas.shape[:2]} do not match masks {pred.shape}")
    canvas[gt & ~pred] = GT_COLOR
    canvas[pred & ~gt] = PRED_COLOR
    canvas[pred & gt] = MATCH_COLOR
    return canvas


@main.command("overlay")
@click.argument("pred_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("gt_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--background", "background_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Compose over this image instead of black.")
@_guarded
def cmd_overlay(pred_path, gt_path, out_path, background_path):
    """Render a green/red/yellow agreement overlay of two binary masks."""
    pred = data.load_mask(pred_path)
    gt = data.load_mask(gt_path)
    background = None
    if background_path:
        with Image.open(background_path) as im:
            background = np.asarray(im.convert("RGB"))
    canvas = render_overlay(pred, gt, background)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas, mode="RGB").save(out_path)
    click.echo(f"wrote {out_path}")


@main.command("params")
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="ModelConfig JSON file.")
@click.option("--checkpoint", "ckpt_path", default=None,
              type=click.Path(exists=True, dir_okay=False))
@_guarded
def cmd_params(config_path, ckpt_path):
    """Report train-phase and test-phase parameter counts as JSON."""
    if (config_path is None) == (ckpt_path is None):
        raise ConfigurationError("pass exactly one of --config or --checkpoint")
    if config_path:
        cfg = ModelConfig.from_dict(json.loads(Path(config_path).read_text()))
        model = engine.SuperVessel(cfg)
    else:
        model = load_checkpoint(ckpt_path)
    if model.phase == PHASE_TRAIN:
        train_count = count_parameters(model, "train")
    else:
        train_count = None  # stripped checkpoint: train branches are gone
    test_count = count_parameters(model, "test")
    report = {
        "train_parameters": train_count,
        "test_parameters": test_count,
        "difference": train_count - test_count if train_count is not None else None,
    }
    click.echo(json.dumps(report, indent=2))


@main.command("synth")
@click.option("--n", "n_images", default=8, show_default=True, type=int)
@click.option("--size", default=128, show_default=True, type=int,
              help="Square HR image size.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--noise", default=0.02, show_default=True, type=float)
@click.option("--channels", default=3, show_default=True, type=int)
@click.option("--train-fraction", default=0.75, show_default=True, type=float)
@click.option("--out", "out_path", required=True, type=click.Path(file_okay=False))
@click.option("--force", is_flag=True)
@_guarded
def cmd_synth(n_images, size, seed, noise, channels, train_fraction, out_path, force):
    """Materialize a synthetic dataset (PNGs plus manifest.json)."""
    out = _prepare_out_dir(out_path, force)
    cfg = data.SyntheticConfig(n_images=n_images, hr_size=(size, size),
                               noise_sigma=noise, seed=seed, in_channels=channels)
    manifest = data.materialize_dataset(cfg, out, train_fraction=train_fraction)
    n_train, n_test = manifest.counts()
    click.echo(f"wrote {n_train} train + {n_test} test pairs under {out}")


@main.command("ablate")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--seeds", default="0,1,2", show_default=True,
              help="Comma-separated seed list.")
@click.option("--out", "out_path", required=True, type=click.Path(file_okay=False))
@click.option("--force", is_flag=True)
@_guarded
def cmd_ablate(config_path, manifest_path, seeds, out_path, force):
    """Train and score the four ablation rows; writes ablation.csv/json."""
    cfg = _load_train_config(config_path)
    manifest = data.load_manifest(manifest_path)
    seed_list = tuple(int(s) for s in seeds.split(",") if s)
    out = _prepare_out_dir(out_path, force)
    rows = engine.run_ablation(manifest, cfg, seeds=seed_list, out_dir=out)
    click.echo(engine.ablation_csv(rows))


if __name__ == "__main__":
    main()
