"""Segmentation losses on [B, 1, H, W] logits and the two-stage weighting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorgraph import Node, ShapeError, _make, _sigmoid

DICE_EPS = 1.0
STAGE1_WEIGHTS = {"bce": 0.5, "dice": 0.3, "lovasz": 0.2}


def _check(logits: Node, targets) -> np.ndarray:
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"targets {t.shape} do not match logits {logits.shape}")
    return t


def bce_with_logits(logits: Node, targets) -> Node:
    """Mean binary cross-entropy, in the overflow-safe form."""
    t = _check(logits, targets)
    z = logits.values
    per_pixel = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def bw(g):
        logits._accumulate(g * (_sigmoid(z) - t) / n)

    return _make(np.array(per_pixel.mean()), (logits,), "bce", bw)


def soft_dice(logits: Node, targets) -> Node:
    """``1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`` per sample, batch mean."""
    t = _check(logits, targets)
    b = t.shape[0]
    p = _sigmoid(logits.values)
    axes = tuple(range(1, t.ndim))
    inter = (p * t).sum(axis=axes)
    denom = p.sum(axis=axes) + t.sum(axis=axes) + DICE_EPS
    ratio = (2.0 * inter + DICE_EPS) / denom
    loss = float(np.mean(1.0 - ratio))

    def bw(g):
        shape = (b,) + (1,) * (t.ndim - 1)
        dp = -(2.0 * t * denom.reshape(shape) - (2.0 * inter + DICE_EPS).reshape(shape)) / denom.reshape(shape) ** 2
        logits._accumulate(g * dp * p * (1.0 - p) / b)

    return _make(np.array(loss), (logits,), "dice", bw)


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Increments of the Jaccard loss along the sorted prefix chain."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def _lovasz_flat(z: np.ndarray, t: np.ndarray):
    signs = 2.0 * t - 1.0
    errors = 1.0 - z * signs
    # stable sort on the negated errors: descending, ties keep original order
    order = np.argsort(-errors, kind="stable")
    grad = lovasz_grad(t[order])
    hinge = np.maximum(errors[order], 0.0)
    loss = float(hinge @ grad)
    dz = np.zeros_like(z)
    dz[order] = -np.where(errors[order] > 0, grad, 0.0) * signs[order]
    return loss, dz


def lovasz_hinge(logits: Node, targets) -> Node:
    """Binary Lovasz hinge, computed per flattened image and averaged over the batch.

    The sort permutation is treated as constant in the backward pass.
    """
    t = _check(logits, targets)
    b = t.shape[0]
    z = logits.values.reshape(b, -1)
    tf = t.reshape(b, -1)
    losses, dzs = zip(*(_lovasz_flat(z[i], tf[i]) for i in range(b)))
    dz = np.stack(dzs).reshape(logits.shape) / b

    return _make(np.array(np.mean(losses)), (logits,), "lovasz", lambda g: logits._accumulate(g * dz))


@dataclass
class LossBreakdown:
    bce: float
    dice: float
    lovasz: float
    total: float
    stage: int


def staged_loss(logits: Node, targets, stage: int) -> tuple[Node, LossBreakdown]:
    """Stage 1: 0.5 BCE + 0.3 Dice + 0.2 Lovasz. Stage 2: Lovasz alone.

    Returns the differentiable total and a breakdown of every component.
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    parts = {
        "bce": bce_with_logits(logits, targets),
        "dice": soft_dice(logits, targets),
        "lovasz": lovasz_hinge(logits, targets),
    }
    weights = STAGE1_WEIGHTS if stage == 1 else {"bce": 0.0, "dice": 0.0, "lovasz": 1.0}
    used = [(k, w) for k, w in weights.items() if w]
    value = sum(w * float(parts[k].values) for k, w in used)

    inputs = tuple(parts[k] for k, _ in used)

    def route(g):
        for k, w in used:
            parts[k]._accumulate(g * w)

    total = _make(np.array(value), inputs, f"staged{stage}", route)
    report = LossBreakdown(
        bce=float(parts["bce"].values),
        dice=float(parts["dice"].values),
        lovasz=float(parts["lovasz"].values),
        total=value,
        stage=stage,
    )
    return total, report
