"""Segmentation metrics: confusion counts, threshold metrics, rank AUC, aggregation.

Vessel pixels are the positive class. Per-image metrics are fractions in
[0, 1]; aggregation reports mean and population std scaled to percent.
"""

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError

# Column order used for CSV output (precision appended after the core five).
METRIC_KEYS = ("se", "iou", "dice", "acc", "auc", "p")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def _check_binary(mask, name):
    values = np.unique(mask)
    if not np.isin(values, (0, 1)).all():
        raise ValidationError(f"{name} must be strictly 0/1 valued, found {values[:8]}")


def confusion(pred_bin, gt):
    """Count tp/fp/fn/tn over all pixels of a binary prediction against a binary mask."""
    pred = np.asarray(pred_bin)
    truth = np.asarray(gt)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {truth.shape}")
    _check_binary(pred, "prediction")
    _check_binary(truth, "ground truth")
    p = pred.astype(bool)
    t = truth.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(np.count_nonzero(~p & ~t))
    return ConfusionCounts(tp, fp, fn, tn)


def scalar_metrics(counts):
    """Precision, sensitivity, IoU, Dice and accuracy from confusion counts.

    0/0 ratios are defined as 0.
    """
    if counts.total <= 0:
        raise ValidationError("confusion counts cover zero pixels")

    def ratio(num, den):
        return num / den if den else 0.0

    return {
        "p": ratio(counts.tp, counts.tp + counts.fp),
        "se": ratio(counts.tp, counts.tp + counts.fn),
        "iou": ratio(counts.tp, counts.tp + counts.fp + counts.fn),
        "dice": ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn),
        "acc": ratio(counts.tp + counts.tn, counts.total),
    }


def _average_ranks(x):
    # 1-based ranks with ties averaged.
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts + 1
    return ((starts + ends) / 2.0)[inverse]


def auc(scores, gt):
    """Rank-based (Mann-Whitney) AUC; ties contribute 1/2.

    Returns None when the ground truth contains a single class, which callers
    must exclude from aggregation.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(gt).ravel()
    if s.shape != truth.shape:
        raise ShapeError(f"score shape {np.shape(scores)} != ground truth shape {np.shape(gt)}")
    _check_binary(truth, "ground truth")
    pos = truth.astype(bool)
    n_pos = int(np.count_nonzero(pos))
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _average_ranks(s)
    rank_sum = float(ranks[pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class MetricsReport:
    per_image: list  # dicts with p, se, iou, dice, acc, auc (auc may be None)
    aggregate: dict  # metric -> {"mean": float, "std": float} in percent

    def to_json(self):
        return json.dumps({"per_image": self.per_image, "aggregate": self.aggregate}, indent=2)

    def to_csv(self):
        """Table with one row per image plus mean/std rows, all in percent."""
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(("image",) + tuple(k.upper() for k in METRIC_KEYS))

        def fmt(value):
            return "" if value is None else f"{100.0 * value:.4f}"

        for i, row in enumerate(self.per_image):
            writer.writerow([i] + [fmt(row.get(k)) for k in METRIC_KEYS])
        for stat in ("mean", "std"):
            writer.writerow([stat] + [
                "" if self.aggregate[k][stat] is None else f"{self.aggregate[k][stat]:.4f}"
                for k in METRIC_KEYS
            ])
        return buf.getvalue()


def aggregate(reports):
    """Mean and population std per metric over per-image reports, in percent.

    Entries with auc=None (single-class images) are left out of the AUC
    aggregate only.
    """
    if not reports:
        raise ValidationError("cannot aggregate an empty list of reports")
    agg = {}
    for key in METRIC_KEYS:
        values = [r[key] for r in reports if r.get(key) is not None]
        if not values:
            agg[key] = {"mean": None, "std": None}
            continue
        # Sorted reduction keeps the aggregate independent of report order.
        arr = np.sort(np.asarray(values, dtype=np.float64))
        agg[key] = {"mean": float(arr.mean() * 100.0), "std": float(arr.std() * 100.0)}
    return MetricsReport(per_image=list(reports), aggregate=agg)
