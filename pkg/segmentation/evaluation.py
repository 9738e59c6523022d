"""
Segmentation metrics: dataset-level confusion matrix and intersection-over-union
"""

from typing import List, Optional, Sequence, Tuple

import numpy as np

from models import InvalidInputError, LabelMap, UndefinedMetricError


class ConfusionMatrix:
    """(L+1)x(L+1) pixel counts; rows are ground truth, columns predictions"""

    def __init__(self, num_labels: int, counts: Optional[np.ndarray] = None):
        """
        Args:
            num_labels: L+1
            counts: optional initial counts
        """
        self.num_labels = num_labels
        if counts is None:
            counts = np.zeros((num_labels, num_labels), dtype=np.int64)
        self.counts = np.array(counts, dtype=np.int64, copy=True)
        if self.counts.shape != (num_labels, num_labels):
            raise InvalidInputError(f"Counts must be {num_labels}x{num_labels}")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, gt: LabelMap, pred: LabelMap,
                   void_label: Optional[int] = None) -> "ConfusionMatrix":
        """Add one image pair; void ground-truth pixels are skipped"""
        if gt.labels.shape != pred.labels.shape:
            raise InvalidInputError(
                f"Ground truth {gt.labels.shape} and prediction {pred.labels.shape} differ in size")
        n = self.num_labels
        gt.check_labels(n, void_label)
        pred.check_labels(n)
        truth = gt.labels.ravel()
        guess = pred.labels.ravel()
        if void_label is not None:
            keep = truth != void_label
            truth, guess = truth[keep], guess[keep]
        self.counts += np.bincount(n * truth + guess, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_labels != self.num_labels:
            raise InvalidInputError("Cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        return self

    def pixel_accuracy(self) -> float:
        if self.total == 0:
            raise UndefinedMetricError("Pixel accuracy of an empty confusion matrix")
        return float(np.trace(self.counts)) / self.total


def accumulate(cm: ConfusionMatrix, gt: LabelMap, pred: LabelMap,
               void_label: Optional[int] = None) -> ConfusionMatrix:
    return cm.accumulate(gt, pred, void_label)


def mean_iou(cm: ConfusionMatrix) -> Tuple[List[Optional[float]], float]:
    """
    Per-class IOU (None where union is empty) and their mean over defined classes
    """
    counts = cm.counts
    inter = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=1) + counts.sum(axis=0) - np.diag(counts)
    per_class = [float(inter[l] / union[l]) if union[l] > 0 else None
                 for l in range(cm.num_labels)]
    defined = [v for v in per_class if v is not None]
    if not defined:
        raise UndefinedMetricError("No class appears in ground truth or prediction")
    return per_class, float(np.mean(defined))


def evaluate_pairs(pairs: Sequence[Tuple[LabelMap, LabelMap]], num_labels: int,
                   void_label: Optional[int] = None) -> ConfusionMatrix:
    """Sum the confusion matrices of (gt, pred) pairs"""
    cm = ConfusionMatrix(num_labels)
    for gt, pred in pairs:
        cm.accumulate(gt, pred, void_label)
    return cm


def format_iou_table(per_class: Sequence[Optional[float]], mean: float,
                     accuracy: Optional[float] = None) -> str:
    """Fixed-order table: one row per class, then the mean, 4 decimals"""
    lines = ["class  iou"]
    for label, value in enumerate(per_class):
        lines.append(f"{label:<6} {'undefined' if value is None else f'{value:.4f}'}")
    lines.append(f"{'mean':<6} {mean:.4f}")
    if accuracy is not None:
        lines.append(f"{'pixacc':<6} {accuracy:.4f}")
    return "\n".join(lines)
