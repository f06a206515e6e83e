"""Hard-label segmentation metrics: Dice, IoU / mIoU and HD95."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

SEG_COLUMNS = ("dice", "miou", "hd95")


@dataclass
class SegMetricsReport:
    dice: float
    miou: float
    hd95: float
    per_class_dice: dict = field(default_factory=dict)
    per_class_iou: dict = field(default_factory=dict)

    def row(self) -> list[float]:
        return [self.dice, self.miou, self.hd95]


def _check(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.size and (pred.min() < 0 or gt.min() < 0):
        raise ValueError("labels must be non-negative")
    return pred, gt


def dice(pred, gt, k: int) -> float:
    pred, gt = _check(pred, gt)
    p, g = pred == k, gt == k
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def iou(pred, gt, k: int) -> float:
    pred, gt = _check(pred, gt)
    p, g = pred == k, gt == k
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def miou(pred, gt, classes) -> float:
    if isinstance(classes, int):
        classes = range(classes)
    return float(np.mean([iou(pred, gt, k) for k in classes]))


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour (outside counts as background)."""
    m = np.pad(np.asarray(mask, dtype=bool), 1)
    core = m[1:-1, 1:-1]
    interior = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return core & ~interior


def hd95(pred, gt, k: int) -> float:
    """95th percentile of symmetric boundary-to-boundary nearest distances; inf if a side is empty."""
    pred, gt = _check(pred, gt)
    bp, bg = boundary(pred == k), boundary(gt == k)
    if not bp.any() or not bg.any():
        return float("inf")
    to_g = distance_transform_edt(~bg)[bp]
    to_p = distance_transform_edt(~bp)[bg]
    return float(np.percentile(np.concatenate([to_g, to_p]), 95))


def seg_report(pred, gt, n_classes: int = 3, foreground=None) -> SegMetricsReport:
    """Dice and HD95 averaged over foreground classes; mIoU over all classes."""
    pred, gt = _check(pred, gt)
    if pred.size and (pred.max() >= n_classes or gt.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    fg = list(foreground) if foreground is not None else list(range(1, n_classes))
    dices = {k: dice(pred, gt, k) for k in range(n_classes)}
    ious = {k: iou(pred, gt, k) for k in range(n_classes)}
    return SegMetricsReport(
        dice=float(np.mean([dices[k] for k in fg])),
        miou=float(np.mean(list(ious.values()))),
        hd95=float(np.mean([hd95(pred, gt, k) for k in fg])),
        per_class_dice=dices,
        per_class_iou=ious,
    )
