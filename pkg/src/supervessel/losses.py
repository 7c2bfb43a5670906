"""Loss terms for the dual-stream model.

Three terms are combined: per-class cross-entropy on the decomposed
segmentation probabilities, an MSE/SSIM mix for the reconstruction branch,
and a cross-entropy on the interaction-boosted prediction
q = clamp(seg * fim + seg, eps, 1).
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DivergenceError, ShapeError


@dataclass
class LossConfig:
    alpha: float = 0.5        # MSE share of the reconstruction loss
    eps: float = 1e-7         # clamp floor inside log terms
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_c1: float = 0.01 ** 2  # (0.01 * L)^2 with dynamic range L = 1
    ssim_c2: float = 0.03 ** 2

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.eps <= 0:
            raise ConfigurationError(f"eps must be positive, got {self.eps}")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ConfigurationError(f"ssim_window must be odd, got {self.ssim_window}")

    def to_dict(self):
        return {
            "alpha": self.alpha, "eps": self.eps, "ssim_window": self.ssim_window,
            "ssim_sigma": self.ssim_sigma, "ssim_c1": self.ssim_c1, "ssim_c2": self.ssim_c2,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LossReport:
    l_seg: float
    l_sr: float
    l_fim: float
    total: float

    def to_dict(self, step=None, lr=None):
        d = {}
        if step is not None:
            d["step"] = step
        d.update({"l_seg": self.l_seg, "l_sr": self.l_sr, "l_fim": self.l_fim, "total": self.total})
        if lr is not None:
            d["lr"] = lr
        return d


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: expected matching shapes, got {tuple(a.shape)} vs {tuple(b.shape)}")


def seg_loss(o_seg_probs, gt_onehot, eps=1e-7):
    """Cross-entropy between class probabilities and one-hot ground truth.

    Per pixel: -(1/n) * sum_i GT_i * log(max(p_i, eps)), averaged over batch
    and pixels. The 1/n factor is the class count.
    """
    _check_same_shape(o_seg_probs, gt_onehot, "seg_loss")
    n = o_seg_probs.shape[1]
    ce = -(gt_onehot * torch.log(o_seg_probs.clamp(min=eps))).sum(dim=1) / n
    return ce.mean()


def _gaussian_window(size, sigma, dtype, device):
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a, b, cfg=None):
    """Mean structural similarity over Gaussian-weighted local windows.

    Local statistics are taken over valid window positions only (no padding),
    so constant images reduce exactly to the closed-form luminance and
    contrast terms. Result lies in [-1, 1]; identical inputs give 1.
    """
    cfg = cfg if cfg is not None else LossConfig()
    _check_same_shape(a, b, "ssim")
    win = cfg.ssim_window
    if a.shape[-2] < win or a.shape[-1] < win:
        raise ShapeError(
            f"image extents {tuple(a.shape[-2:])} smaller than ssim window {win}")
    channels = a.shape[1]
    kernel = _gaussian_window(win, cfg.ssim_sigma, a.dtype, a.device)
    kernel = kernel.expand(channels, 1, win, win).contiguous()

    mu_a = F.conv2d(a, kernel, groups=channels)
    mu_b = F.conv2d(b, kernel, groups=channels)
    var_a = F.conv2d(a * a, kernel, groups=channels) - mu_a * mu_a
    var_b = F.conv2d(b * b, kernel, groups=channels) - mu_b * mu_b
    cov = F.conv2d(a * b, kernel, groups=channels) - mu_a * mu_b

    num = (2 * mu_a * mu_b + cfg.ssim_c1) * (2 * cov + cfg.ssim_c2)
    den = (mu_a * mu_a + mu_b * mu_b + cfg.ssim_c1) * (var_a + var_b + cfg.ssim_c2)
    return (num / den).mean()


def sr_loss(sr, hr, cfg=None):
    """Reconstruction loss: alpha * MSE + (1 - alpha) * (1 - SSIM)."""
    cfg = cfg if cfg is not None else LossConfig()
    _check_same_shape(sr, hr, "sr_loss")
    mse = ((sr - hr) ** 2).mean()
    if cfg.alpha >= 1.0:
        return mse
    structural = 1.0 - ssim(sr, hr, cfg)
    if cfg.alpha <= 0.0:
        return structural
    return cfg.alpha * mse + (1.0 - cfg.alpha) * structural


def fim_loss(o_seg_probs, o_fim, gt_onehot, eps=1e-7):
    """Cross-entropy on the interaction-boosted prediction.

    q_i = clamp(seg_i * fim_i + seg_i, eps, 1); the clamp ceiling keeps the
    log term a proper penalty since seg + seg*fim can reach 2*seg. With
    fim = 0 this reduces exactly to seg_loss.
    """
    _check_same_shape(o_seg_probs, o_fim, "fim_loss")
    _check_same_shape(o_seg_probs, gt_onehot, "fim_loss")
    q = (o_seg_probs * o_fim + o_seg_probs).clamp(min=eps, max=1.0)
    n = q.shape[1]
    ce = -(gt_onehot * torch.log(q)).sum(dim=1) / n
    return ce.mean()


def total_loss(l_seg, l_sr=0.0, l_fim=0.0):
    """Combine scalar loss terms into a LossReport; rejects non-finite terms."""
    terms = {"l_seg": float(l_seg), "l_sr": float(l_sr), "l_fim": float(l_fim)}
    for name, value in terms.items():
        if not math.isfinite(value):
            raise DivergenceError(name, value)
    return LossReport(total=terms["l_seg"] + terms["l_sr"] + terms["l_fim"], **terms)
