"""Evaluation and calibration measures: mean squared error over images,
precision-weighted F-measure, and expected calibration error with the
per-bin reliability table behind it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagecore import as_gray_array


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if not np.isin(gt, (0.0, 1.0)).all():
        raise ValueError("ground truth must be binary")


def mmse(preds, gts) -> float:
    """Mean over images of the per-pixel mean squared error."""
    if len(preds) == 0 or len(preds) != len(gts):
        raise ValueError("need equal, non-empty prediction and ground-truth lists")
    total = 0.0
    for p, g in zip(preds, gts):
        pa, ga = as_gray_array(p), as_gray_array(g)
        _check_pair(pa, ga)
        total += float(((pa - ga) ** 2).mean())
    return total / len(preds)


def adaptive_threshold(pred) -> float:
    """Saliency-style threshold: twice the prediction mean, capped at 1."""
    return min(1.0, 2.0 * float(as_gray_array(pred).mean()))


def f_measure(pred, gt, beta2: float = 0.3, threshold: float = 0.5) -> float | None:
    """Precision-weighted F-measure of the thresholded prediction.

    Returns None when the ground truth has no positive pixel (undefined;
    callers exclude such images from dataset means). TP == 0 gives 0.
    """
    pa, ga = as_gray_array(pred), as_gray_array(gt)
    _check_pair(pa, ga)
    positive = ga > 0.5
    if not positive.any():
        return None
    binary = pa >= threshold
    tp = float(np.count_nonzero(binary & positive))
    if tp == 0:
        return 0.0
    fp = float(np.count_nonzero(binary & ~positive))
    fn = float(np.count_nonzero(~binary & positive))
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return (1.0 + beta2) * precision * recall / (beta2 * precision + recall)


@dataclass(frozen=True)
class ReliabilityBin:
    low: float
    high: float
    count: int
    mean_confidence: float
    mean_accuracy: float


@dataclass(frozen=True)
class ReliabilityReport:
    bins: tuple[ReliabilityBin, ...]
    ece: float

    @property
    def total_count(self) -> int:
        return sum(b.count for b in self.bins)


def ece(pred, gt, m: int = 10) -> ReliabilityReport:
    """Expected calibration error of a single binary prediction map.

    Pixel confidence is max(p, 1-p) and the predicted class is p >= 0.5, so
    bins partition [0.5, 1.0] uniformly. ECE is the count-weighted mean
    absolute gap between per-bin accuracy and confidence.
    """
    if m < 1:
        raise ValueError(f"need at least one bin, got {m}")
    pa, ga = as_gray_array(pred), as_gray_array(gt)
    _check_pair(pa, ga)

    p = pa.ravel()
    correct = ((p >= 0.5) == (ga.ravel() > 0.5)).astype(np.float64)
    conf = np.maximum(p, 1.0 - p)
    edges = np.linspace(0.5, 1.0, m + 1)
    # Bins are [low, high) except the last, which includes confidence 1.
    idx = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, m - 1)

    n = p.size
    bins = []
    total = 0.0
    for b in range(m):
        sel = idx == b
        count = int(np.count_nonzero(sel))
        if count:
            mean_conf = float(conf[sel].mean())
            mean_acc = float(correct[sel].mean())
            total += (count / n) * abs(mean_acc - mean_conf)
        else:
            mean_conf = 0.0
            mean_acc = 0.0
        bins.append(ReliabilityBin(float(edges[b]), float(edges[b + 1]), count, mean_conf, mean_acc))
    return ReliabilityReport(tuple(bins), total)


def mean_defined(values) -> float | None:
    """Mean of the non-None entries; None when nothing is defined."""
    kept = [v for v in values if v is not None]
    if not kept:
        return None
    return float(np.mean(kept))
