"""IoU, the salt-competition precision score, threshold search and flip TTA."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import segnet
from .tensorgraph import _sigmoid

IOU_THRESHOLDS = np.round(np.arange(0.50, 0.951, 0.05), 2)
SEARCH_GRID = np.round(np.arange(0.30, 0.7001, 0.01), 2)


def _pair(pred, gt):
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return pred, gt


def iou(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def tgs_precision(pred, gt) -> float:
    """Fraction of IoU thresholds 0.50..0.95 strictly exceeded.

    An empty ground truth scores 1.0 only for an empty prediction; a
    non-empty ground truth with an empty prediction scores 0.0.
    """
    pred, gt = _pair(pred, gt)
    if not gt.any():
        return 0.0 if pred.any() else 1.0
    if not pred.any():
        return 0.0
    return float(np.mean(iou(pred, gt) > IOU_THRESHOLDS))


@dataclass
class EvalResult:
    tgs_map: float
    best_threshold: float
    per_image: list = field(default_factory=list)  # (id, iou, tgs_precision)
    n_empty_correct: int = 0

    def to_dict(self) -> dict:
        return {
            "tgs_map": self.tgs_map,
            "best_threshold": self.best_threshold,
            "n_images": len(self.per_image),
            "n_empty_correct": self.n_empty_correct,
        }


def _scores_at(probs, gts, t: float) -> np.ndarray:
    return np.array([tgs_precision(p > t, g) for p, g in zip(probs, gts)])


def threshold_search(probs, gts) -> tuple[float, float]:
    """Best binarization cutoff on the 0.30..0.70 grid (step 0.01).

    Pixels count as salt when ``prob > t``. Ties go to the lowest threshold.
    """
    probs, gts = list(probs), list(gts)
    if not probs or len(probs) != len(gts):
        raise ValueError("threshold_search needs matching, non-empty sequences")
    best_t, best = float(SEARCH_GRID[0]), -1.0
    for t in SEARCH_GRID:
        score = float(_scores_at(probs, gts, t).mean())
        if score > best:
            best_t, best = float(t), score
    return best_t, best


def evaluate(ids, probs, gts) -> EvalResult:
    """Threshold search followed by a per-image breakdown at the chosen cutoff."""
    probs, gts = list(probs), list(gts)
    t, _ = threshold_search(probs, gts)
    per_image, n_empty = [], 0
    for sid, p, g in zip(ids, probs, gts):
        pred = p > t
        per_image.append((sid, iou(pred, g), tgs_precision(pred, g)))
        n_empty += int(not np.any(g) and not pred.any())
    tgs_map = float(np.mean([row[2] for row in per_image]))
    return EvalResult(tgs_map, t, per_image, n_empty)


def tta_hflip(model, batch) -> np.ndarray:
    """Average of plain and horizontally flipped predictions, as probabilities."""
    batch = np.asarray(batch, dtype=np.float64)
    plain = _sigmoid(segnet.forward(model, batch).values)
    flipped = _sigmoid(segnet.forward(model, batch[..., ::-1].copy()).values)[..., ::-1]
    return 0.5 * (plain + flipped)
