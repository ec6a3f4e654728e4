"""Segmentation and boundary losses with deep supervision."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ShapeError, Tensor
from .engine import functional as F

CLAMP_EPS = 1e-7
SMOOTH = 1e-6


@dataclass
class LossConfig:
    alpha: float = 3.0
    levels: int = 3
    class_mode: str = "multiclass"  # or "binary"

    def validate(self) -> list:
        errs = []
        if not self.alpha > 0:
            errs.append("loss.alpha must be > 0")
        if self.levels < 1:
            errs.append("loss.levels must be >= 1")
        if self.class_mode not in ("binary", "multiclass"):
            errs.append("loss.class_mode must be 'binary' or 'multiclass'")
        return errs


def _const(y, like: Tensor) -> Tensor:
    arr = y.data if isinstance(y, Tensor) else np.asarray(y)
    return Tensor(arr.astype(like.dtype, copy=False))


def ce_loss(y_hat: Tensor, y, multiclass: bool = False) -> Tensor:
    """Mean cross-entropy of probabilities ``y_hat`` against targets ``y``.

    Binary: ``-(y log p + (1-y) log(1-p))`` averaged over all elements.
    Multiclass: ``y`` is one-hot ``(N, K, ...)`` and the per-pixel sum over
    ``K`` of ``-y log p`` is averaged over pixels. ``p`` is clamped to
    ``[1e-7, 1 - 1e-7]``.
    """
    y = _const(y, y_hat)
    if y.shape != y_hat.shape:
        raise ShapeError(f"ce_loss: prediction {y_hat.shape} vs target {y.shape}")
    p = F.clip(y_hat, CLAMP_EPS, 1 - CLAMP_EPS)
    if multiclass:
        n_pix = y_hat.size // y_hat.shape[1]
        return F.scale(F.sum(F.mul(y, F.log(p))), -1.0 / n_pix)
    pos = F.mul(y, F.log(p))
    neg = F.mul(F.one_minus(y), F.log(F.one_minus(p)))
    return F.scale(F.sum(F.add(pos, neg)), -1.0 / y_hat.size)


def miou_loss(y_hat: Tensor, y) -> Tensor:
    """``1 - sum(y p) / sum(y + p - y p)`` with a 1e-6 smoothing term."""
    y = _const(y, y_hat)
    inter = F.sum(F.mul(y, y_hat))
    union = F.sub(F.add(F.sum(y), F.sum(y_hat)), inter)
    return F.one_minus(F.div(F.add_scalar(inter, SMOOTH), F.add_scalar(union, SMOOTH)))


def dice_loss(y_hat: Tensor, y) -> Tensor:
    """``1 - 2 sum(y p) / sum(y + p)`` with a 1e-6 smoothing term."""
    y = _const(y, y_hat)
    inter = F.sum(F.mul(y, y_hat))
    denom = F.add(F.sum(y), F.sum(y_hat))
    return F.one_minus(F.div(F.add_scalar(F.scale(inter, 2.0), SMOOTH), F.add_scalar(denom, SMOOTH)))


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    """``(N, H, W)`` integer labels -> ``(N, K, H, W)`` float one-hot."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels outside [0, {k})")
    return (labels[:, None] == np.arange(k)[None, :, None, None]).astype(np.float64)


def seg_terms(logits: Tensor, labels: np.ndarray):
    """(CE, mIoU) for one decoder level. Binary heads have one channel."""
    k = logits.shape[1]
    if k == 1:
        prob = F.sigmoid(logits)
        y = (np.asarray(labels)[:, None] > 0).astype(np.float64)
        return ce_loss(prob, y), miou_loss(prob, y)
    prob = F.softmax_channels(logits)
    y = one_hot(labels, k)
    ious = [
        miou_loss(F.slice_channels(prob, c, c + 1), y[:, c:c + 1]) for c in range(k)
    ]
    miou = ious[0]
    for t in ious[1:]:
        miou = F.add(miou, t)
    return ce_loss(prob, y, multiclass=True), F.scale(miou, 1.0 / k)


def total_loss(outputs, y_seg: np.ndarray, y_bnd, cfg: LossConfig):
    """``sum_levels (CE + mIoU) + alpha * Dice(boundary)``.

    Returns ``(total, breakdown)`` where breakdown maps term names to floats.
    Without a boundary head (some ablations) the boundary term is omitted.
    """
    seg_logits, bnd_logits = outputs
    if len(seg_logits) != cfg.levels:
        raise ValueError(f"expected {cfg.levels} supervised levels, got {len(seg_logits)}")
    breakdown = {}
    total = None
    for i, logits in enumerate(seg_logits, start=1):
        ce, miou = seg_terms(logits, y_seg)
        breakdown[f"ce_{i}"] = float(ce.data)
        breakdown[f"miou_{i}"] = float(miou.data)
        term = F.add(ce, miou)
        total = term if total is None else F.add(total, term)
    if bnd_logits is not None:
        y_bnd = np.asarray(y_bnd, dtype=np.float64)
        if y_bnd.shape != bnd_logits.shape:
            raise ShapeError(f"boundary target {y_bnd.shape} vs logits {bnd_logits.shape}")
        dice = dice_loss(F.sigmoid(bnd_logits), y_bnd)
        breakdown["dice_boundary"] = float(dice.data)
        bterm = F.scale(dice, cfg.alpha)
        breakdown["boundary"] = float(bterm.data)
        total = F.add(total, bterm)
    breakdown["total"] = float(total.data)
    return total, breakdown
