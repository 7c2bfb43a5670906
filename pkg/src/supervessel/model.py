"""Dual-stream segmentation network.

A shared encoder feeds two U-Net style decoders: the segmentation decoder
ends in an upsampling-with-feature-decomposition (UFD) head, the auxiliary
reconstruction decoder produces a high-resolution image. A feature
interaction module (FIM) turns the concatenated branch outputs into a
per-class spatial weight matrix. Test-phase inference uses the segmentation
branch only, so the reconstruction decoder and FIM can be stripped.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, ConfigurationError, ShapeError

PHASE_TRAIN = "train"
PHASE_TEST = "test"

# State-dict prefixes of the branches that exist only during training.
TRAIN_ONLY_PREFIXES = ("dec_sr.", "fim.")


@dataclass
class ModelConfig:
    in_channels: int = 3
    n_classes: int = 2
    encoder_widths: tuple = (64, 128, 256, 512, 1024)
    upscale_factor: int = 2
    fim_dim: int = 48
    sr_out_channels: int = None  # defaults to in_channels
    # Branch switches used by the ablation rows; the full model keeps all three.
    with_sr: bool = True
    with_ufd: bool = True
    with_fim: bool = True

    def __post_init__(self):
        if self.sr_out_channels is None:
            self.sr_out_channels = self.in_channels
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.validate()

    def validate(self):
        if self.in_channels < 1:
            raise ConfigurationError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.n_classes < 2:
            raise ConfigurationError(f"n_classes must be >= 2, got {self.n_classes}")
        if len(self.encoder_widths) < 2 or any(w < 1 for w in self.encoder_widths):
            raise ConfigurationError(
                f"encoder_widths needs >= 2 positive entries, got {self.encoder_widths}")
        factor = self.upscale_factor
        if factor < 2 or factor & (factor - 1):
            raise ConfigurationError(
                f"upscale_factor must be a power of 2 and >= 2, got {factor}")
        if self.fim_dim < 3 or self.fim_dim % 3:
            raise ConfigurationError(
                f"fim_dim must be a positive multiple of 3, got {self.fim_dim}")
        if self.sr_out_channels < 1:
            raise ConfigurationError(
                f"sr_out_channels must be >= 1, got {self.sr_out_channels}")
        if self.with_fim and not self.with_sr:
            raise ConfigurationError("the FIM consumes the SR output; enable with_sr")

    @property
    def depth(self):
        return len(self.encoder_widths) - 1

    @property
    def stride(self):
        # Input extents must be divisible by this.
        return 2 ** self.depth

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class SuperVesselOutputs:
    o_seg_logits: torch.Tensor          # (B, n_classes, nH, nW)
    o_seg_probs: torch.Tensor           # (B, n_classes, nH, nW), softmax over classes
    o_sr: torch.Tensor = None           # (B, sr_out_channels, nH, nW)
    o_fim: torch.Tensor = None          # (B, n_classes, nH, nW), sigmoid output


class DoubleConv(nn.Module):
    """Two padded 3x3 convolutions, each followed by ReLU."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class Encoder(nn.Module):
    """Contracting path; returns one feature map per stage, bottleneck last."""

    def __init__(self, in_channels, widths):
        super().__init__()
        self.n_stages = len(widths)
        self.pool = nn.MaxPool2d(2)
        self.add_module("stage0", DoubleConv(in_channels, widths[0]))
        for i in range(1, self.n_stages):
            self.add_module(f"stage{i}", DoubleConv(widths[i - 1], widths[i]))

    def forward(self, x):
        feats = []
        for i in range(self.n_stages):
            if i > 0:
                x = self.pool(x)
            x = getattr(self, f"stage{i}")(x)
            feats.append(x)
        return feats


class DecoderStage(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_ch, out_ch, kernel_size=2, stride=2)
        self.block = DoubleConv(2 * out_ch, out_ch)

    def forward(self, x, skip):
        return self.block(torch.cat([skip, self.up(x)], dim=1))


class Decoder(nn.Module):
    """Expanding path consuming the encoder skips; output at input resolution."""

    def __init__(self, widths):
        super().__init__()
        self.n_stages = len(widths) - 1
        for i in range(self.n_stages):
            self.add_module(f"stage{i}", DecoderStage(widths[i + 1], widths[i]))

    def forward(self, feats):
        x = feats[-1]
        for i in reversed(range(self.n_stages)):
            x = getattr(self, f"stage{i}")(x, feats[i])
        return x


class UFD(nn.Module):
    """Upsampling with feature decomposition.

    A single 1x1 convolution decomposes decoder features into per-class
    channels (background, vessel), then bilinear interpolation lifts the
    decomposed maps to the high-resolution grid.
    """

    def __init__(self, in_ch, n_classes, factor):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, n_classes, kernel_size=1)
        self.factor = factor

    def forward(self, x):
        return F.interpolate(self.proj(x), scale_factor=self.factor,
                             mode="bilinear", align_corners=False)


class SRDecoder(Decoder):
    """Reconstruction decoder: expanding path plus a 1x1 projection and
    bilinear upsample to the high-resolution image."""

    def __init__(self, widths, out_channels, factor):
        super().__init__(widths)
        self.head = nn.Conv2d(widths[0], out_channels, kernel_size=1)
        self.factor = factor

    def forward(self, feats):
        x = super().forward(feats)
        return F.interpolate(self.head(x), scale_factor=self.factor,
                             mode="bilinear", align_corners=False)


def channel_shuffle(x, groups):
    """Permute channels so output k reads input (k % groups)*(C/groups) + k//groups.

    Pure reshape-transpose permutation; values are untouched.
    """
    b, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"channel count {c} not divisible by groups={groups}")
    return x.reshape(b, groups, c // groups, h, w).transpose(1, 2).reshape(b, c, h, w)


class FIM(nn.Module):
    """Feature interaction module.

    Concatenated segmentation probabilities and reconstructed image are
    projected to `dim` channels, processed by three parallel 3x3 convolutions
    with dilation rates 1, 2 and 4 over equal channel groups, shuffled across
    the groups, integrated with 1x1 convolutions, and squashed by a sigmoid
    into a per-class weight matrix in (0, 1).
    """

    DILATIONS = (1, 2, 4)

    def __init__(self, in_channels, dim, n_classes):
        super().__init__()
        group = dim // len(self.DILATIONS)
        self.proj = nn.Conv2d(in_channels, dim, kernel_size=1)
        self.branches = nn.ModuleList(
            nn.Conv2d(group, group, kernel_size=3, padding=r, dilation=r)
            for r in self.DILATIONS)
        self.integrate = nn.Conv2d(dim, dim, kernel_size=1)
        self.mix = nn.Conv2d(dim, dim, kernel_size=1)
        self.out = nn.Conv2d(dim, n_classes, kernel_size=1)

    def forward(self, seg_probs, sr):
        if seg_probs.shape[-2:] != sr.shape[-2:]:
            raise ShapeError(
                f"FIM inputs disagree spatially: {tuple(seg_probs.shape[-2:])}"
                f" vs {tuple(sr.shape[-2:])}")
        x = torch.cat([seg_probs, sr], dim=1)
        x = F.relu(self.proj(x))
        parts = torch.chunk(x, len(self.branches), dim=1)
        x = torch.cat([branch(p) for branch, p in zip(self.branches, parts)], dim=1)
        x = channel_shuffle(x, groups=len(self.branches))
        x = self.integrate(x)
        x = F.relu(self.mix(x))
        return torch.sigmoid(self.out(x))


def _init_parameters(module):
    # He fan-in for conv kernels, zero biases.
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class SuperVessel(nn.Module):
    """The full dual-stream network; see module docstring for the wiring."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.phase = PHASE_TRAIN
        widths = config.encoder_widths
        self.encoder = Encoder(config.in_channels, widths)
        self.dec_seg = Decoder(widths)
        if config.with_ufd:
            self.ufd = UFD(widths[0], config.n_classes, config.upscale_factor)
        else:
            # Plain head: classify at low resolution, upsample the normalized
            # probabilities instead of the decomposed channels.
            self.seg_head = nn.Conv2d(widths[0], config.n_classes, kernel_size=1)
        if config.with_sr:
            self.dec_sr = SRDecoder(widths, config.sr_out_channels, config.upscale_factor)
        if config.with_fim:
            self.fim = FIM(config.n_classes + config.sr_out_channels,
                           config.fim_dim, config.n_classes)
        self.apply(_init_parameters)

    def _check_input(self, x):
        if x.dim() != 4:
            raise ShapeError(f"expected a (B, C, H, W) tensor, got {tuple(x.shape)}")
        cfg = self.config
        if x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
        h, w = x.shape[-2:]
        if h % cfg.stride or w % cfg.stride:
            raise ShapeError(
                f"input extents ({h}, {w}) must be divisible by {cfg.stride} "
                f"for a {cfg.depth}-stage encoder")

    def _segment(self, x):
        feats = self.encoder(x)
        dec = self.dec_seg(feats)
        if self.config.with_ufd:
            logits = self.ufd(dec)
            probs = torch.softmax(logits, dim=1)
        else:
            lr_logits = self.seg_head(dec)
            probs = F.interpolate(torch.softmax(lr_logits, dim=1),
                                  scale_factor=self.config.upscale_factor,
                                  mode="bilinear", align_corners=False)
            logits = F.interpolate(lr_logits, scale_factor=self.config.upscale_factor,
                                   mode="bilinear", align_corners=False)
        return feats, logits, probs

    def forward_train(self, x):
        """Full forward: segmentation, reconstruction, and interaction outputs."""
        if self.phase != PHASE_TRAIN:
            raise ConfigurationError(
                "forward_train on a test-phase model: the reconstruction and "
                "interaction branches have been stripped")
        self._check_input(x)
        feats, logits, probs = self._segment(x)
        o_sr = self.dec_sr(feats) if self.config.with_sr else None
        o_fim = self.fim(probs, o_sr) if self.config.with_fim else None
        return SuperVesselOutputs(o_seg_logits=logits, o_seg_probs=probs,
                                  o_sr=o_sr, o_fim=o_fim)

    def forward_test(self, x):
        """Segmentation-only forward; valid in either phase.

        Runs the identical subgraph used by forward_train for the
        segmentation output, so the results agree bitwise.
        """
        self._check_input(x)
        _, _, probs = self._segment(x)
        return probs

    def forward(self, x):
        if self.phase == PHASE_TRAIN:
            return self.forward_train(x)
        return self.forward_test(x)


def build_model(config):
    """Instantiate the network with He-initialized kernels and zero biases."""
    config.validate()
    return SuperVessel(config)


def count_parameters(model, phase=None):
    """Total scalar parameter count of the subgraph active in `phase`."""
    phase = phase or model.phase
    if phase not in (PHASE_TRAIN, PHASE_TEST):
        raise ConfigurationError(f"unknown phase {phase!r}")
    total = 0
    for name, p in model.named_parameters():
        if phase == PHASE_TEST and name.startswith(TRAIN_ONLY_PREFIXES):
            continue
        total += p.numel()
    return total


def strip_for_test(model):
    """Return a test-phase copy without the SR decoder and FIM parameters.

    The segmentation subgraph is untouched, so forward_test output is
    bitwise identical to the source model's.
    """
    if model.phase != PHASE_TRAIN:
        raise ConfigurationError("model is already in test phase")
    cfg = dataclasses.replace(model.config, with_sr=False, with_fim=False)
    stripped = SuperVessel(cfg)
    state = {k: v.clone() for k, v in model.state_dict().items()
             if not k.startswith(TRAIN_ONLY_PREFIXES)}
    stripped.load_state_dict(state)
    stripped.phase = PHASE_TEST
    return stripped


def state_hash(state_dict):
    """Content hash over parameter names and raw bytes, order-independent."""
    digest = hashlib.sha256()
    for name in sorted(state_dict):
        tensor = state_dict[name].detach().cpu().contiguous()
        digest.update(name.encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(model, path):
    """Write parameters plus a JSON metadata sidecar next to the file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    torch.save({"state_dict": state,
                "config": model.config.to_dict(),
                "phase": model.phase}, path)
    meta = {
        "config": model.config.to_dict(),
        "phase": model.phase,
        "parameter_count": count_parameters(model),
        "created": datetime.now(timezone.utc).isoformat(),
        "content_hash": state_hash(state),
    }
    meta_path = path.with_suffix(".meta.json")
    meta_path.write_text(json.dumps(meta, indent=2))
    return path


def load_checkpoint(path):
    """Rebuild a model from a checkpoint written by save_checkpoint."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu")
        config = ModelConfig.from_dict(payload["config"])
        model = SuperVessel(config)
        model.load_state_dict(payload["state_dict"])
        model.phase = payload.get("phase", PHASE_TRAIN)
    except (KeyError, RuntimeError, ValueError) as err:
        raise CheckpointError(f"cannot load checkpoint {path}: {err}") from err
    return model
