"""Salient-object-detection scores: MAE, mean F-measure, S-measure, E-measure.

Predictions are float maps in [0, 1]; ground truths are binary masks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_EPS = np.spacing(1.0)
BETA2 = 0.3


class MetricError(ValueError):
    pass


@dataclass
class EvalResult:
    s_measure: float
    mean_fbeta: float
    mae: float
    e_measure: float
    n_images: int = 1
    n_excluded: int = 0  # images with empty GT, left out of the F average

    def row(self) -> dict:
        return {"s_measure": self.s_measure, "mean_fbeta": self.mean_fbeta, "mae": self.mae,
                "e_measure": self.e_measure, "n_images": self.n_images, "n_excluded": self.n_excluded}


def _prep(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt) > 0.5
    if pred.shape != gt.shape:
        raise MetricError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return pred, gt


def adaptive_threshold(pred: np.ndarray) -> float:
    return min(2.0 * float(pred.mean()), 1.0)


def mae(pred, gt) -> float:
    pred, gt = _prep(pred, gt)
    return float(np.abs(pred - gt).mean())


def _fbeta_binary(binary: np.ndarray, gt: np.ndarray) -> float:
    tp = np.count_nonzero(binary & gt)
    if tp == 0:
        return 0.0
    p = tp / np.count_nonzero(binary)
    r = tp / np.count_nonzero(gt)
    return (1 + BETA2) * p * r / (BETA2 * p + r)


def mean_fbeta(pred, gt, sweep: bool = False) -> float:
    """Adaptive-threshold F-measure (beta^2 = 0.3); ``sweep`` averages over 256 thresholds instead."""
    pred, gt = _prep(pred, gt)
    if not gt.any():
        raise MetricError("F-measure undefined for ground truth without foreground")
    if sweep:
        return float(np.mean([_fbeta_binary(pred >= t, gt) for t in np.linspace(0, 1, 256)]))
    return _fbeta_binary(pred >= adaptive_threshold(pred), gt)


# ---------------------------------------------------------------- S-measure

def _s_object(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    mu = x.mean()
    sd = x.std(ddof=1) if x.size > 1 else 0.0
    return 2 * mu / (mu * mu + 1 + sd + _EPS)


def _object_score(pred, gt) -> float:
    u = gt.mean()
    fg = _s_object(pred[gt])
    bg = _s_object(1.0 - pred[~gt])
    return u * fg + (1 - u) * bg


def _centroid(gt: np.ndarray) -> tuple[int, int]:
    h, w = gt.shape
    if not gt.any():
        return int(np.round(w / 2)), int(np.round(h / 2))
    y, x = np.argwhere(gt).mean(axis=0).round()
    return int(x) + 1, int(y) + 1


def _ssim_block(pred, gt) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    x, y = pred.mean(), gt.mean()
    d = max(n - 1, 1)
    sx = ((pred - x) ** 2).sum() / d
    sy = ((gt - y) ** 2).sum() / d
    sxy = ((pred - x) * (gt - y)).sum() / d
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / (b + _EPS)
    return 1.0 if b == 0 else 0.0


def _region_score(pred, gt) -> float:
    h, w = gt.shape
    x, y = _centroid(gt)
    g = gt.astype(np.float64)
    area = h * w
    w1 = x * y / area
    w2 = y * (w - x) / area
    w3 = (h - y) * x / area
    w4 = 1 - w1 - w2 - w3
    blocks = [(slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
              (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))]
    return sum(wt * _ssim_block(pred[b], g[b]) for wt, b in zip((w1, w2, w3, w4), blocks))


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    pred, gt = _prep(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1 - pred.mean())
    if y == 1:
        return float(pred.mean())
    s = alpha * _object_score(pred, gt) + (1 - alpha) * _region_score(pred, gt)
    return float(max(s, 0.0))


# ---------------------------------------------------------------- E-measure

def _enhanced_alignment(binary: np.ndarray, gt: np.ndarray) -> float:
    n = gt.size
    n_fg = np.count_nonzero(gt)
    if n_fg == 0:
        return np.count_nonzero(~binary) / n
    if n_fg == n:
        return np.count_nonzero(binary) / n
    # four (pred, gt) value combinations cover every pixel
    mp = binary.mean()
    mg = gt.mean()
    total = 0.0
    for pv in (True, False):
        for gv in (True, False):
            count = np.count_nonzero((binary == pv) & (gt == gv))
            if count == 0:
                continue
            a, b = float(pv) - mp, float(gv) - mg
            xi = 2 * a * b / (a * a + b * b + _EPS)
            total += count * (xi + 1) ** 2 / 4
    return total / n


def e_measure(pred, gt, curve: bool = False) -> float:
    """Adaptive-threshold enhanced-alignment measure; ``curve`` averages over 256 thresholds."""
    pred, gt = _prep(pred, gt)
    if curve:
        return float(np.mean([_enhanced_alignment(pred >= t, gt) for t in np.linspace(0, 1, 256)]))
    return float(_enhanced_alignment(pred >= adaptive_threshold(pred), gt))


def evaluate(pred, gt) -> EvalResult:
    pred, gt = _prep(pred, gt)
    excluded = 0
    try:
        f = mean_fbeta(pred, gt)
    except MetricError:
        f, excluded = float("nan"), 1
    return EvalResult(s_measure(pred, gt), f, mae(pred, gt), e_measure(pred, gt), 1, excluded)


def evaluate_dataset(preds, gts) -> EvalResult:
    """Per-image scores averaged over the set; empty-GT images are excluded from the F mean."""
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise MetricError(f"{len(preds)} predictions but {len(gts)} ground truths")
    if not preds:
        raise MetricError("no images to evaluate")
    rows = [evaluate(p, g) for p, g in zip(preds, gts)]
    fs = [r.mean_fbeta for r in rows if not r.n_excluded]
    return EvalResult(
        s_measure=float(np.mean([r.s_measure for r in rows])),
        mean_fbeta=float(np.mean(fs)) if fs else float("nan"),
        mae=float(np.mean([r.mae for r in rows])),
        e_measure=float(np.mean([r.e_measure for r in rows])),
        n_images=len(rows),
        n_excluded=len(rows) - len(fs),
    )
