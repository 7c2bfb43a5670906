"""Training and evaluation drivers.

SGD with momentum and weight decay on a polynomial learning-rate schedule,
per-step loss logging, divergence guarding, checkpointing of best and final
weights, and the four-row ablation runner.
"""

import copy
import csv
import dataclasses
import io
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import DatasetManifest, load_samples, to_onehot
from .errors import ConfigurationError, DivergenceError
from .losses import LossConfig, fim_loss, seg_loss, sr_loss, total_loss
from .metrics import aggregate, auc, confusion, scalar_metrics
from .model import (ModelConfig, SuperVessel, load_checkpoint, save_checkpoint)

DETERMINISTIC_ENV = "SUPERVESSEL_DETERMINISTIC"


def poly_lr(iteration, max_iter, init_lr=0.01, power=0.9):
    """Polynomial decay: init_lr * (1 - iteration/max_iter) ** power."""
    if max_iter <= 0:
        raise ConfigurationError(f"max_iter must be positive, got {max_iter}")
    if iteration < 0 or iteration > max_iter:
        raise ConfigurationError(
            f"iteration {iteration} outside [0, {max_iter}]")
    return ((1.0 - iteration / max_iter) ** power) * init_lr


@dataclass
class AblationFlags:
    asr: bool = True
    ufd: bool = True
    fim: bool = True

    def __post_init__(self):
        # Flags are monotone: fim needs ufd, ufd needs asr.
        if self.fim and not self.ufd:
            raise ConfigurationError("ablation flag fim=on requires ufd=on")
        if self.ufd and not self.asr:
            raise ConfigurationError("ablation flag ufd=on requires asr=on")

    def to_dict(self):
        return {"asr": self.asr, "ufd": self.ufd, "fim": self.fim}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TrainConfig:
    init_lr: float = 0.01
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0001
    epochs: int = 128
    batch_size: int = 2
    seed: int = 0
    val_every: int = 1  # epochs between validation passes; 0 disables
    ablation: AblationFlags = field(default_factory=AblationFlags)
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.init_lr <= 0:
            raise ConfigurationError(f"init_lr must be positive, got {self.init_lr}")

    def to_dict(self):
        return {
            "init_lr": self.init_lr, "power": self.power,
            "momentum": self.momentum, "weight_decay": self.weight_decay,
            "epochs": self.epochs, "batch_size": self.batch_size,
            "seed": self.seed, "val_every": self.val_every,
            "ablation": self.ablation.to_dict(),
            "loss": self.loss.to_dict(),
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "ablation" in d:
            d["ablation"] = AblationFlags.from_dict(d["ablation"])
        if "loss" in d:
            d["loss"] = LossConfig.from_dict(d["loss"])
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


@dataclass
class RunLog:
    steps: list = field(default_factory=list)  # per-step loss/lr dicts
    val: list = field(default_factory=list)    # per-epoch validation summaries
    started: float = 0.0
    finished: float = 0.0

    def write_jsonl(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for record in self.steps:
                fh.write(json.dumps(record) + "\n")
        return path


@dataclass
class TrainResult:
    model: SuperVessel            # final weights, in place
    best_state: dict              # state_dict of the best-validation-IoU weights
    best_iou: float               # percent; -1 when no validation ran
    best_path: Path = None
    final_path: Path = None


def seed_everything(seed):
    torch.manual_seed(seed)
    if os.environ.get(DETERMINISTIC_ENV) == "1":
        torch.use_deterministic_algorithms(True)
    return np.random.default_rng(seed)


def build_from_train_config(cfg):
    """Seed the RNG and build the model variant selected by the ablation flags."""
    seed_everything(cfg.seed)
    model_cfg = dataclasses.replace(
        cfg.model,
        with_sr=cfg.ablation.asr,
        with_ufd=cfg.ablation.ufd,
        with_fim=cfg.ablation.fim,
    )
    return SuperVessel(model_cfg)


def _param_groups(model, weight_decay):
    # Decay conv kernels only; biases are excluded.
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if name.endswith(".bias") else decay).append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def _collate(pairs, n_classes):
    x = torch.from_numpy(np.stack([p.lr_image for p in pairs]))
    hr = torch.from_numpy(np.stack([p.hr_image for p in pairs]))
    gt = torch.from_numpy(np.stack([to_onehot(p.hr_mask, n_classes) for p in pairs]))
    return x, hr, gt


def _resolve_samples(source, split):
    if isinstance(source, DatasetManifest):
        return load_samples(source, split)
    return list(source)


def train(model, manifest, cfg, out_dir=None):
    """Optimize the model on the manifest's train split.

    Returns (TrainResult, RunLog). The test split serves as validation for
    best-checkpoint selection when val_every > 0. On a non-finite loss the
    run aborts with DivergenceError after writing a last_good checkpoint.
    """
    rng = seed_everything(cfg.seed)
    train_pairs = _resolve_samples(manifest, "train")
    if not train_pairs:
        raise ConfigurationError("manifest has no train entries")
    val_pairs = []
    if cfg.val_every > 0 and isinstance(manifest, DatasetManifest):
        val_pairs = _resolve_samples(manifest, "test")

    n_classes = model.config.n_classes
    steps_per_epoch = math.ceil(len(train_pairs) / cfg.batch_size)
    max_iter = cfg.epochs * steps_per_epoch
    optimizer = torch.optim.SGD(_param_groups(model, cfg.weight_decay),
                                lr=cfg.init_lr, momentum=cfg.momentum)
    flags = cfg.ablation

    out = Path(out_dir) if out_dir is not None else None
    ckpt_dir = out / "checkpoints" if out else None
    log = RunLog(started=time.time())
    best_iou = -1.0
    best_state = None
    step = 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_pairs))
        for start in range(0, len(train_pairs), cfg.batch_size):
            batch = [train_pairs[i] for i in order[start:start + cfg.batch_size]]
            x, hr, gt = _collate(batch, n_classes)
            lr = poly_lr(step, max_iter, cfg.init_lr, cfg.power)
            for group in optimizer.param_groups:
                group["lr"] = lr

            outputs = model.forward_train(x)
            l_seg = seg_loss(outputs.o_seg_probs, gt, cfg.loss.eps)
            loss = l_seg
            l_sr = l_fim = None
            if flags.asr:
                l_sr = sr_loss(outputs.o_sr, hr, cfg.loss)
                loss = loss + l_sr
            if flags.fim:
                l_fim = fim_loss(outputs.o_seg_probs, outputs.o_fim, gt, cfg.loss.eps)
                loss = loss + l_fim

            try:
                report = total_loss(
                    l_seg.item(),
                    l_sr.item() if l_sr is not None else 0.0,
                    l_fim.item() if l_fim is not None else 0.0)
            except DivergenceError as err:
                if ckpt_dir:
                    save_checkpoint(model, ckpt_dir / "last_good.ckpt")
                    log.write_jsonl(out / "log.jsonl")
                raise DivergenceError(err.term, err.value, step=step) from None

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            log.steps.append(report.to_dict(step=step, lr=lr))
            step += 1

        if val_pairs and cfg.val_every > 0 and (epoch + 1) % cfg.val_every == 0:
            report = evaluate_pairs(val_pairs, model=model)
            iou = report.aggregate["iou"]["mean"]
            log.val.append({"epoch": epoch, "iou": iou,
                            "dice": report.aggregate["dice"]["mean"]})
            if iou > best_iou:
                best_iou = iou
                best_state = copy.deepcopy(model.state_dict())

    log.finished = time.time()
    if best_state is None:
        best_state = copy.deepcopy(model.state_dict())

    result = TrainResult(model=model, best_state=best_state, best_iou=best_iou)
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
        log.write_jsonl(out / "log.jsonl")
        if log.val:
            with (out / "val.jsonl").open("w") as fh:
                for record in log.val:
                    fh.write(json.dumps(record) + "\n")
        result.final_path = save_checkpoint(model, ckpt_dir / "final.ckpt")
        final_state = copy.deepcopy(model.state_dict())
        model.load_state_dict(best_state)
        result.best_path = save_checkpoint(model, ckpt_dir / "best.ckpt")
        model.load_state_dict(final_state)
    return result, log


def predict_probs(model, lr_image):
    """Class probabilities (n_classes, nH, nW) for one LR image array."""
    x = torch.from_numpy(np.ascontiguousarray(lr_image, dtype=np.float32))
    with torch.no_grad():
        probs = model.forward_test(x.unsqueeze(0))
    return probs.squeeze(0).numpy()


def evaluate_pairs(pairs, model=None, predict=None, threshold=0.5):
    """Per-image metrics plus aggregate for SamplePairs.

    `predict` maps a SamplePair to a probability map and defaults to the
    model's test-phase forward; injecting it lets plumbing be tested with a
    known-perfect oracle.
    """
    if predict is None:
        if model is None:
            raise ConfigurationError("evaluate_pairs needs a model or a predict fn")
        predict = lambda pair: predict_probs(model, pair.lr_image)
    reports = []
    for pair in pairs:
        probs = predict(pair)
        vessel = probs[1]
        pred_bin = (vessel >= threshold).astype(np.uint8)
        m = scalar_metrics(confusion(pred_bin, pair.hr_mask))
        m["auc"] = auc(vessel, pair.hr_mask)
        reports.append(m)
    return aggregate(reports)


def evaluate(checkpoint, manifest, split="test"):
    """Load a checkpoint and score it on one split of a manifest."""
    model = checkpoint if isinstance(checkpoint, SuperVessel) else load_checkpoint(checkpoint)
    if model.config.in_channels != manifest.in_channels:
        raise ConfigurationError(
            f"checkpoint expects {model.config.in_channels} input channels but "
            f"manifest {manifest.name!r} provides {manifest.in_channels}")
    pairs = _resolve_samples(manifest, split)
    return evaluate_pairs(pairs, model=model)


# The four ablation rows: baseline, +ASR, +ASR+UFD, +ASR+UFD+FIM.
ABLATION_ROWS = (
    {"asr": False, "ufd": False, "fim": False},
    {"asr": True, "ufd": False, "fim": False},
    {"asr": True, "ufd": True, "fim": False},
    {"asr": True, "ufd": True, "fim": True},
)
ABLATION_METRICS = ("se", "iou", "dice", "acc", "auc")


def run_ablation(manifest, base_cfg, seeds=(0, 1, 2), out_dir=None):
    """Train and score the four ablation rows over the given seeds.

    Returns a list of row dicts with per-metric mean/std (percent) across
    seeds; writes ablation.csv and ablation.json when out_dir is given.
    """
    rows = []
    for flags in ABLATION_ROWS:
        per_seed = {m: [] for m in ABLATION_METRICS}
        for seed in seeds:
            cfg = dataclasses.replace(
                base_cfg, seed=seed, ablation=AblationFlags(**flags))
            model = build_from_train_config(cfg)
            train(model, manifest, cfg)
            report = evaluate(model, manifest, split="test")
            for m in ABLATION_METRICS:
                per_seed[m].append(report.aggregate[m]["mean"])
        row = dict(flags)
        for m in ABLATION_METRICS:
            arr = np.asarray(per_seed[m], dtype=np.float64)
            row[m] = {"mean": float(arr.mean()), "std": float(arr.std())}
        rows.append(row)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(rows, indent=2))
        (out / "ablation.csv").write_text(ablation_csv(rows))
    return rows


def ablation_csv(rows):
    """Render ablation rows as a CSV with mean+-std cells per metric."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["ASR", "UFD", "FIM"] + [m.upper() for m in ABLATION_METRICS])
    for row in rows:
        cells = ["x" if not row[k] else "v" for k in ("asr", "ufd", "fim")]
        for m in ABLATION_METRICS:
            cells.append(f"{row[m]['mean']:.2f}+-{row[m]['std']:.2f}")
        writer.writerow(cells)
    return buf.getvalue()
