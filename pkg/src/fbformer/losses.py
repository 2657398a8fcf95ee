"""Segmentation losses, the two-round composite objective, and IoU metrics."""
from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from . import ops
from .config import LossConfig
from .errors import DataError
from .tensor import Tensor


def _check_target(target: np.ndarray, num_classes: int) -> np.ndarray:
    target = np.asarray(target)
    bad = (target < 0) | (target >= num_classes)
    if bad.any():
        loc = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"label {target[loc]} at pixel {loc} outside [0, {num_classes})")
    return target.astype(np.int64, copy=False)


def _batched(logits: Tensor, target: np.ndarray):
    if logits.ndim == 3:
        logits = ops.reshape(logits, (1,) + logits.shape)
        target = np.asarray(target)[None]
    return logits, target


def ce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean pixel-wise cross entropy; logits (N, C, H, W) or (C, H, W)."""
    logits, target = _batched(logits, target)
    target = _check_target(target, logits.shape[1])
    picked = ops.take_class(ops.log_softmax(logits, axis=1), target, axis=1)
    return ops.neg(ops.mean(picked))


def soft_iou_loss(probs: Tensor, target: np.ndarray) -> Tensor:
    """``1 - mean_c sum(p t) / sum(p + t - p t)``, sums over batch and pixels."""
    probs, target = _batched(probs, target)
    num_classes = probs.shape[1]
    target = _check_target(target, num_classes)
    onehot = np.moveaxis(np.eye(num_classes, dtype=probs.dtype)[target], -1, 1)
    inter = ops.mul(probs, onehot)
    axes = (0, 2, 3)
    num = ops.sum(inter, axis=axes)
    den = ops.sub(ops.add(ops.sum(probs, axis=axes), onehot.sum(axis=axes)), num)
    return ops.sub(1.0, ops.mean(ops.div(num, den)))


def seg_loss(logits: Tensor, target: np.ndarray, cfg: LossConfig) -> Tensor:
    """``lambda1 * CE + lambda2 * IoU`` on one logit map."""
    ce = ce_loss(logits, target)
    iou = soft_iou_loss(ops.softmax(logits, axis=-3), target)
    return combine(ce, iou, cfg.lambda1, cfg.lambda2)


def combine(a, b, wa: float, wb: float):
    """``wa * a + wb * b`` for tensors or floats."""
    return a * wa + b * wb


def round_loss(main_logits: Tensor, aux_logits: Optional[Tensor], target: np.ndarray, cfg: LossConfig) -> Tensor:
    main = seg_loss(main_logits, target, cfg)
    if aux_logits is None or cfg.lambda3 == 0:
        return main
    return combine(main, seg_loss(aux_logits, target, cfg), 1.0, cfg.lambda3)


def total_loss(first, second, cfg: LossConfig):
    """``alpha * L_first + L_second``."""
    return combine(first, second, cfg.alpha, 1.0)


class ConfusionMatrix:
    """Pixel counts indexed ``[ground truth, prediction]``; mergeable with ``+``."""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), np.int64) if counts is None else counts

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
        if pred.shape != gt.shape:
            raise DataError(f"prediction and ground truth sizes differ: {pred.size} vs {gt.size}")
        _check_target(gt, self.num_classes)
        _check_target(pred, self.num_classes)
        idx = gt.astype(np.int64) * self.num_classes + pred.astype(np.int64)
        self.counts += np.bincount(idx, minlength=self.num_classes ** 2).reshape(self.num_classes, self.num_classes)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN where the class never occurs in gt or prediction."""
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        union = tp + fp + fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / np.maximum(union, 1), np.nan)

    def present(self) -> np.ndarray:
        return self.counts.sum(axis=1) > 0

    def miou(self) -> float:
        """Mean IoU over classes present in the ground truth; classes absent from gt are excluded."""
        present = self.present()
        if not present.any():
            return float("nan")
        return float(self.iou()[present].mean())


def iou_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                accumulator: Optional[ConfusionMatrix] = None):
    """Accumulate one prediction and return ``(per-class IoU, mIoU, matrix)``."""
    cm = accumulator if accumulator is not None else ConfusionMatrix(num_classes)
    cm.update(pred, gt)
    return cm.iou(), cm.miou(), cm


def format_iou_table(names: Sequence[str], rows: dict, digits: int = 2) -> str:
    """Per-class IoU table (percentages) with one row per method, mIoU last."""
    header = ["Method", *names, "mIoU"]
    lines: List[List[str]] = [header]
    for method, (ious, miou) in rows.items():
        cells = ["-" if np.isnan(v) else f"{100 * v:.{digits}f}" for v in ious]
        lines.append([method, *cells, f"{100 * miou:.{digits}f}"])
    widths = [max(len(r[i]) for r in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in lines)
