"""Confusion-matrix accumulation, per-class IoU, mIoU and overall accuracy.

Rows are ground truth, columns are predictions. Points whose ground truth is
the ignore class are never accumulated. Classes with an empty IoU
denominator are excluded from the mean rather than counted as zero.
"""

from __future__ import annotations

import numpy as np

from .errors import DataFormatError


class ConfusionMatrix:
    def __init__(self, num_classes: int, ignore_class: int | None = 0):
        if num_classes < 1:
            raise DataFormatError("num_classes must be >= 1")
        if ignore_class is not None and not 0 <= ignore_class < num_classes:
            raise DataFormatError(f"ignore_class {ignore_class} out of range")
        self.num_classes = num_classes
        self.ignore_class = ignore_class
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, gt: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        gt = np.asarray(gt)
        pred = np.asarray(pred)
        if gt.shape != pred.shape:
            raise DataFormatError(f"length mismatch: gt {gt.shape} vs pred {pred.shape}")
        if gt.size == 0:
            return self
        for name, arr in (("gt", gt), ("pred", pred)):
            if arr.min() < 0 or arr.max() >= self.num_classes:
                raise DataFormatError(f"{name} labels outside 0..{self.num_classes - 1}")
        if self.ignore_class is not None:
            keep = gt != self.ignore_class
            gt, pred = gt[keep], pred[keep]
        flat = gt.astype(np.int64) * self.num_classes + pred
        self.counts += np.bincount(flat, minlength=self.num_classes**2).reshape(
            self.num_classes, self.num_classes
        )
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes or other.ignore_class != self.ignore_class:
            raise DataFormatError("cannot merge confusion matrices with different layouts")
        out = ConfusionMatrix(self.num_classes, self.ignore_class)
        out.counts = self.counts + other.counts
        return out

    def per_class_iou(self) -> np.ndarray:
        """(C,) IoU values; NaN for excluded classes (ignore or empty)."""
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        denom = tp + fp + fn
        iou = np.full(self.num_classes, np.nan)
        present = denom > 0
        if self.ignore_class is not None:
            present[self.ignore_class] = False
        iou[present] = tp[present] / denom[present]
        return iou

    def miou(self) -> float:
        iou = self.per_class_iou()
        included = ~np.isnan(iou)
        if not included.any():
            raise DataFormatError("mIoU undefined: no class has any accumulated point")
        return float(iou[included].mean())

    def oacc(self) -> float:
        total = self.counts.sum()
        if total == 0:
            raise DataFormatError("oACC undefined: empty confusion matrix")
        return float(np.trace(self.counts) / total)
