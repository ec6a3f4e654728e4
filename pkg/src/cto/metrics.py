"""Boundary ground truth and evaluation metrics (Dice, IoU, average HD)."""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree

UNDEFINED = "undefined"


def _cross_neighbors(m: np.ndarray, fill: bool) -> list:
    p = np.pad(m, 1, constant_values=fill)
    return [p[1:-1, 1:-1], p[:-2, 1:-1], p[2:, 1:-1], p[1:-1, :-2], p[1:-1, 2:]]


def dilate_cross(mask: np.ndarray) -> np.ndarray:
    return np.logical_or.reduce(_cross_neighbors(mask.astype(bool), False))


def erode_cross(mask: np.ndarray) -> np.ndarray:
    """Erosion with a 3x3 cross; pixels outside the image count as background."""
    return np.logical_and.reduce(_cross_neighbors(mask.astype(bool), False))


def boundary_gt(mask: np.ndarray) -> np.ndarray:
    """Morphological gradient ``dilate XOR erode`` (3x3 cross), as uint8."""
    m = np.asarray(mask) > 0
    return (dilate_cross(m) ^ erode_cross(m)).astype(np.uint8)


def downsample_boundary(bnd: np.ndarray, factor: int = 4) -> np.ndarray:
    """Block max-pool of ``(..., H, W)`` by ``factor`` (keeps thin edges)."""
    *lead, h, w = bnd.shape
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} not divisible by {factor}")
    b = bnd.reshape(*lead, h // factor, factor, w // factor, factor)
    return b.max(axis=(-3, -1))


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the mask."""
    m = np.asarray(mask) > 0
    return m & ~erode_cross(m)


def dice_metric(pred: np.ndarray, gt: np.ndarray) -> float:
    a, b = np.asarray(pred) > 0, np.asarray(gt) > 0
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (sa + sb)


def iou_metric(pred: np.ndarray, gt: np.ndarray) -> float:
    a, b = np.asarray(pred) > 0, np.asarray(gt) > 0
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def avg_hausdorff(pred: np.ndarray, gt: np.ndarray) -> float:
    """Symmetric mean nearest-boundary distance in pixels.

    Returns ``inf`` when exactly one mask is empty and ``0`` when both are.
    """
    pa = np.argwhere(mask_boundary(pred)).astype(np.float64)
    pb = np.argwhere(mask_boundary(gt)).astype(np.float64)
    if len(pa) == 0 and len(pb) == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        return math.inf
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return float((d_ab.mean() + d_ba.mean()) / 2.0)


def logits_to_labels(logits: np.ndarray) -> np.ndarray:
    """``(N, K, H, W)`` logits -> ``(N, H, W)`` labels (threshold 0.5 if K == 1)."""
    if logits.shape[1] == 1:
        return (logits[:, 0] > 0).astype(np.int64)
    return logits.argmax(axis=1)


def per_image_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> dict:
    """Dice/IoU/avg-HD macro-averaged over foreground classes ``1..K-1``."""
    classes = range(1, max(num_classes, 2))
    per = {}
    for c in classes:
        a, b = pred == c, gt == c
        per[c] = {"dice": dice_metric(a, b), "iou": iou_metric(a, b), "avg_hd": avg_hausdorff(a, b)}
    hds = [v["avg_hd"] for v in per.values()]
    return {
        "dice": float(np.mean([v["dice"] for v in per.values()])),
        "iou": float(np.mean([v["iou"] for v in per.values()])),
        "avg_hd": float(np.mean(hds)) if all(math.isfinite(h) for h in hds) else math.inf,
        "per_class": per,
    }


def _stat(vals):
    finite = [v for v in vals if math.isfinite(v)]
    if not finite:
        return UNDEFINED, UNDEFINED
    return float(np.mean(finite)), float(np.std(finite))


def aggregate(records: list) -> dict:
    """Mean/std over per-image metric dicts -> the metrics JSON document.

    Images whose HD is undefined (one empty mask) are left out of the HD
    mean and counted in ``avg_hd_undefined``.
    """
    out = {"n_images": len(records)}
    for key in ("dice", "iou", "avg_hd"):
        mean, std = _stat([r[key] for r in records])
        out[key] = mean
        out[key + "_std"] = std
    out["avg_hd_undefined"] = sum(1 for r in records if not math.isfinite(r["avg_hd"]))
    per_class = {}
    classes = sorted({c for r in records for c in r["per_class"]})
    for c in classes:
        block = {}
        for key in ("dice", "iou", "avg_hd"):
            block[key], block[key + "_std"] = _stat([r["per_class"][c][key] for r in records])
        per_class[str(c)] = block
    out["per_class"] = per_class
    return out


def pooled(fold_blocks: list) -> dict:
    """Mean/std of fold-level means (k-fold summary)."""
    out = {"n_folds": len(fold_blocks)}
    for key in ("dice", "iou", "avg_hd"):
        vals = [b[key] for b in fold_blocks if b[key] != UNDEFINED]
        out[key], out[key + "_std"] = _stat(vals) if vals else (UNDEFINED, UNDEFINED)
    return out
