"""Dataset manifests, low-resolution input simulation, and synthetic data.

A manifest is a JSON file listing HR image / HR mask pairs with split
membership, the HR target size, and the downsampling factor used to
simulate the low-resolution network input. Masks always stay at HR; only
images are downsampled. The synthetic generator draws smooth curvilinear
structures so the whole pipeline can be trained and verified at desk scale.
"""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ManifestError, ShapeError, ValidationError

BACKBONE_STRIDE = 16  # default 4-stage contracting path


@dataclass
class ManifestEntry:
    image: Path
    mask: Path
    split: str  # "train" or "test"


@dataclass
class DatasetManifest:
    name: str
    hr_size: tuple            # (height, width)
    lr_factor: int
    entries: list
    in_channels: int = 3
    lr_size: tuple = None     # declared input size; hr_size // lr_factor when omitted

    def __post_init__(self):
        self.hr_size = tuple(int(v) for v in self.hr_size)
        if self.lr_size is None:
            self.lr_size = tuple(v // self.lr_factor for v in self.hr_size)
        else:
            self.lr_size = tuple(int(v) for v in self.lr_size)

    def split_entries(self, split):
        if split not in ("train", "test"):
            raise ManifestError(f"unknown split {split!r}")
        return [e for e in self.entries if e.split == split]

    def counts(self):
        return len(self.split_entries("train")), len(self.split_entries("test"))

    def to_dict(self):
        return {
            "name": self.name,
            "hr_size": list(self.hr_size),
            "lr_size": list(self.lr_size),
            "lr_factor": self.lr_factor,
            "in_channels": self.in_channels,
            "entries": [
                {"image": str(e.image), "mask": str(e.mask), "split": e.split}
                for e in self.entries
            ],
        }


@dataclass
class SamplePair:
    hr_image: np.ndarray  # (C, H, W) float32 in [0, 1]
    hr_mask: np.ndarray   # (H, W) uint8 in {0, 1}
    lr_image: np.ndarray  # (C, H/f, W/f) float32 in [0, 1]


def load_manifest(path, check_files=True):
    """Load and validate a manifest; paths resolve relative to the file.

    With check_files=True (the default for real runs) every referenced file
    must exist and the HR size must divide by both lr_factor and the
    backbone stride. check_files=False inspects metadata only, e.g. for the
    shipped dataset templates whose files are not distributed.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ManifestError(f"manifest {path} is not valid JSON: {err}") from err
    return parse_manifest(raw, base_dir=path.parent, check_files=check_files)


def parse_manifest(raw, base_dir=".", check_files=True):
    for key in ("name", "hr_size", "lr_factor", "entries"):
        if key not in raw:
            raise ManifestError(f"manifest missing required key {key!r}")
    hr_size = raw["hr_size"]
    if not (isinstance(hr_size, (list, tuple)) and len(hr_size) == 2):
        raise ManifestError(f"hr_size must be [height, width], got {hr_size!r}")
    factor = raw["lr_factor"]
    if not isinstance(factor, int) or factor < 1:
        raise ManifestError(f"lr_factor must be a positive integer, got {factor!r}")

    base = Path(base_dir)
    entries = []
    for i, e in enumerate(raw["entries"]):
        for key in ("image", "mask", "split"):
            if key not in e:
                raise ManifestError(f"entry {i} missing key {key!r}")
        if e["split"] not in ("train", "test"):
            raise ManifestError(f"entry {i} has unknown split {e['split']!r}")
        entries.append(ManifestEntry(image=(base / e["image"]).resolve(),
                                     mask=(base / e["mask"]).resolve(),
                                     split=e["split"]))

    manifest = DatasetManifest(
        name=raw["name"],
        hr_size=tuple(hr_size),
        lr_factor=factor,
        entries=entries,
        in_channels=int(raw.get("in_channels", 3)),
        lr_size=tuple(raw["lr_size"]) if "lr_size" in raw else None,
    )

    if check_files:
        for dim in manifest.hr_size:
            if dim % factor:
                raise ManifestError(
                    f"hr_size {manifest.hr_size} not divisible by lr_factor {factor}")
            if dim % BACKBONE_STRIDE:
                raise ManifestError(
                    f"hr_size {manifest.hr_size} not divisible by the backbone "
                    f"stride {BACKBONE_STRIDE}")
        for e in manifest.entries:
            for p in (e.image, e.mask):
                if not Path(p).exists():
                    raise ManifestError(f"referenced file does not exist: {p}")
    return manifest


def save_manifest(manifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = manifest.to_dict()
    # Store entry paths relative to the manifest location when possible.
    rel = []
    for e in d["entries"]:
        entry = dict(e)
        for key in ("image", "mask"):
            try:
                entry[key] = str(Path(e[key]).relative_to(path.parent.resolve()))
            except ValueError:
                pass
        rel.append(entry)
    d["entries"] = rel
    path.write_text(json.dumps(d, indent=2))
    return path


# Declared metadata of the three evaluation datasets: split counts, target
# HR sizes and simulated LR input sizes. Files are not distributed; these
# templates exist so split and size plumbing stays checkable without data.
_TEMPLATE_SPECS = {
    "hrf": {"n_train": 30, "n_test": 15, "hr_size": (1162, 1752),
            "lr_size": (584, 876), "in_channels": 3},
    "octa": {"n_train": 240, "n_test": 60, "hr_size": (400, 400),
             "lr_size": (200, 200), "in_channels": 3},
    "prime": {"n_train": 10, "n_test": 5, "hr_size": (1296, 1408),
              "lr_size": (648, 704), "in_channels": 3},
}


def builtin_template(name):
    """Manifest template for one of the declared datasets (hrf, octa, prime)."""
    if name not in _TEMPLATE_SPECS:
        raise ManifestError(
            f"unknown template {name!r}; available: {sorted(_TEMPLATE_SPECS)}")
    spec = _TEMPLATE_SPECS[name]
    entries = []
    for i in range(spec["n_train"] + spec["n_test"]):
        split = "train" if i < spec["n_train"] else "test"
        entries.append(ManifestEntry(
            image=Path(f"images/{name}_{i:03d}.png"),
            mask=Path(f"masks/{name}_{i:03d}.png"),
            split=split))
    return DatasetManifest(name=name, hr_size=spec["hr_size"],
                           lr_factor=2, entries=entries,
                           in_channels=spec["in_channels"],
                           lr_size=spec["lr_size"])


def simulate_lr(hr_image, factor, filter="bilinear"):
    """Downsample an HR image (C, H, W) by an integer factor.

    Bilinear with half-pixel alignment; at factor 2 this equals the 2x2
    block average. Deterministic.
    """
    arr = np.asarray(hr_image)
    if arr.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) image, got shape {arr.shape}")
    c, h, w = arr.shape
    if h % factor or w % factor:
        raise ShapeError(f"extents ({h}, {w}) not divisible by factor {factor}")
    if filter not in ("bilinear", "bicubic"):
        raise ValidationError(f"unsupported downsampling filter {filter!r}")
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).unsqueeze(0)
    out = F.interpolate(t, size=(h // factor, w // factor),
                        mode=filter, align_corners=False)
    return out.squeeze(0).numpy()


def to_onehot(mask, n_classes=2):
    """Encode an integer label mask (H, W) as (n_classes, H, W) indicators."""
    arr = np.asarray(mask)
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.array_equal(arr, arr.astype(np.int64)):
            raise ValidationError("mask labels must be integers")
        arr = arr.astype(np.int64)
    if arr.min() < 0 or arr.max() >= n_classes:
        raise ValidationError(
            f"mask labels must lie in [0, {n_classes - 1}], "
            f"found range [{arr.min()}, {arr.max()}]")
    onehot = np.zeros((n_classes,) + arr.shape, dtype=np.float32)
    for i in range(n_classes):
        onehot[i] = arr == i
    return onehot


@dataclass
class SyntheticConfig:
    n_images: int = 8
    hr_size: tuple = (128, 128)
    n_curves: tuple = (3, 6)     # inclusive count range per image
    width_px: tuple = (1, 4)     # inclusive stroke width range
    noise_sigma: float = 0.02
    seed: int = 0
    contrast: float = 0.5        # vessel brightness above the background
    in_channels: int = 3
    lr_factor: int = 2

    def __post_init__(self):
        self.hr_size = tuple(int(v) for v in self.hr_size)
        if self.n_images < 1:
            raise ValidationError("n_images must be >= 1")
        for dim in self.hr_size:
            if dim % self.lr_factor:
                raise ValidationError(
                    f"hr_size {self.hr_size} not divisible by lr_factor {self.lr_factor}")


def _smooth_background(rng, channels, h, w):
    # Low-frequency field in roughly [0.15, 0.45], bilinearly upsampled from
    # a coarse grid so vessels keep headroom above it.
    coarse = rng.uniform(0.15, 0.45, size=(channels, 5, 5)).astype(np.float32)
    t = torch.from_numpy(coarse).unsqueeze(0)
    field = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=True)
    return field.squeeze(0).numpy()


def _draw_curve(rng, mask, h, w, width):
    # Random smooth walk: heading receives Gaussian turning noise per step
    # and the stroke is stamped as a disk at every step.
    y = rng.uniform(0.15 * h, 0.85 * h)
    x = rng.uniform(0.15 * w, 0.85 * w)
    theta = rng.uniform(0, 2 * np.pi)
    n_steps = int(rng.integers(int(0.5 * min(h, w)), int(1.2 * min(h, w))))
    radius = width / 2.0
    r_int = int(np.ceil(radius))
    offsets = np.arange(-r_int, r_int + 1)
    dy, dx = np.meshgrid(offsets, offsets, indexing="ij")
    disk = (dy ** 2 + dx ** 2) <= radius ** 2

    for _ in range(n_steps):
        theta += rng.normal(0.0, 0.15)
        y += np.sin(theta)
        x += np.cos(theta)
        if not (0 <= y < h and 0 <= x < w):
            break
        cy, cx = int(round(y)), int(round(x))
        y0, y1 = max(cy - r_int, 0), min(cy + r_int + 1, h)
        x0, x1 = max(cx - r_int, 0), min(cx + r_int + 1, w)
        mask[y0:y1, x0:x1] |= disk[(y0 - cy + r_int):(y1 - cy + r_int),
                                   (x0 - cx + r_int):(x1 - cx + r_int)]


def generate_synthetic(cfg):
    """Deterministic synthetic dataset: curvilinear strokes on a smooth field.

    The mask is the exact rasterization of the strokes; the HR image is the
    background plus `contrast` on mask pixels plus Gaussian noise, clipped to
    [0, 1]; the LR image is the simulated downsampling of the HR image.
    """
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.hr_size
    pairs = []
    for _ in range(cfg.n_images):
        background = _smooth_background(rng, cfg.in_channels, h, w)
        mask = np.zeros((h, w), dtype=bool)
        n_curves = int(rng.integers(cfg.n_curves[0], cfg.n_curves[1] + 1))
        for _ in range(n_curves):
            width = int(rng.integers(cfg.width_px[0], cfg.width_px[1] + 1))
            _draw_curve(rng, mask, h, w, width)
        image = background + cfg.contrast * mask[None, :, :].astype(np.float32)
        if cfg.noise_sigma > 0:
            image = image + rng.normal(0.0, cfg.noise_sigma,
                                       size=image.shape).astype(np.float32)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        mask_u8 = mask.astype(np.uint8)
        pairs.append(SamplePair(hr_image=image, hr_mask=mask_u8,
                                lr_image=simulate_lr(image, cfg.lr_factor)))
    return pairs


def materialize_dataset(cfg, out_dir, name="synthetic", train_fraction=0.75):
    """Write a synthetic dataset as PNGs plus a manifest; returns the manifest.

    Layout: <out_dir>/images/*.png, <out_dir>/masks/*.png, <out_dir>/manifest.json.
    The first floor(n * train_fraction) samples form the train split.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    pairs = generate_synthetic(cfg)
    n_train = int(len(pairs) * train_fraction)
    entries = []
    for i, pair in enumerate(pairs):
        img_path = out / "images" / f"{name}_{i:03d}.png"
        mask_path = out / "masks" / f"{name}_{i:03d}.png"
        save_image(pair.hr_image, img_path)
        Image.fromarray(pair.hr_mask * 255).save(mask_path)
        entries.append(ManifestEntry(image=img_path.resolve(),
                                     mask=mask_path.resolve(),
                                     split="train" if i < n_train else "test"))
    manifest = DatasetManifest(name=name, hr_size=cfg.hr_size,
                               lr_factor=cfg.lr_factor, entries=entries,
                               in_channels=cfg.in_channels)
    save_manifest(manifest, out / "manifest.json")
    return manifest


def save_image(image, path):
    """Store a (C, H, W) float image in [0, 1] as an 8-bit PNG."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ShapeError(f"expected (1|3, H, W) image, got shape {arr.shape}")
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if u8.shape[0] == 1:
        Image.fromarray(u8[0], mode="L").save(path)
    else:
        Image.fromarray(np.moveaxis(u8, 0, 2), mode="RGB").save(path)


def load_image(path, in_channels=3):
    """Read an image file as (C, H, W) float32 scaled to [0, 1] by /255."""
    with Image.open(path) as im:
        im = im.convert("RGB" if in_channels == 3 else "L")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None, :, :]
    else:
        arr = np.moveaxis(arr, 2, 0)
    return arr


def load_mask(path):
    """Read a single-channel mask PNG; {0, 255} maps to {0, 1}."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    values = np.unique(arr)
    if not np.isin(values, (0, 255)).all():
        raise ValidationError(
            f"mask {path} must contain only 0 and 255, found {values[:8]}")
    return (arr == 255).astype(np.uint8)


def load_samples(manifest, split=None):
    """Materialize SamplePairs for a manifest (optionally one split)."""
    entries = manifest.entries if split is None else manifest.split_entries(split)
    pairs = []
    for e in entries:
        hr = load_image(e.image, manifest.in_channels)
        mask = load_mask(e.mask)
        if hr.shape[1:] != mask.shape:
            raise ManifestError(
                f"image/mask extents disagree for {e.image}: "
                f"{hr.shape[1:]} vs {mask.shape}")
        pairs.append(SamplePair(hr_image=hr, hr_mask=mask,
                                lr_image=simulate_lr(hr, manifest.lr_factor)))
    return pairs
