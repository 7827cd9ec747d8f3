"""Segmentation scores from a pooled confusion matrix."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .layers import IGNORE_LABEL

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    """Pixel accuracy, mean per-class recall and IoU over pooled counts.

    ``per_class_iou[c]`` is NaN for a class that appears in neither the
    ground truth nor the predictions; such classes are left out of the mean.
    Class accuracy averages recall over classes present in the ground truth.
    """

    pixel_accuracy: float
    class_accuracy: float
    mean_iou: float
    per_class_iou: list[float]
    confusion: np.ndarray = field(repr=False)

    def as_row(self) -> dict[str, float]:
        row = {"pixel_acc": self.pixel_accuracy, "class_acc": self.class_accuracy, "mean_iou": self.mean_iou}
        row.update({f"iou_{c}": v for c, v in enumerate(self.per_class_iou)})
        return row


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, n_labels: int, ignore: int = IGNORE_LABEL) -> np.ndarray:
    """``cm[t, p]`` counts pixels of true class ``t`` predicted as ``p``; ``ignore`` pixels skipped."""
    truth = np.asarray(truth).ravel().astype(np.int64)
    pred = np.asarray(pred).ravel().astype(np.int64)
    keep = truth != ignore
    truth, pred = truth[keep], pred[keep]
    if truth.size and (truth.min() < 0 or truth.max() >= n_labels or pred.min() < 0 or pred.max() >= n_labels):
        raise ValueError("label outside 0..L-1")
    return np.bincount(truth * n_labels + pred, minlength=n_labels * n_labels).reshape(n_labels, n_labels)


def report_from_confusion(cm: np.ndarray) -> EvalReport:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise ValueError("no labelled pixels to evaluate")
    tp = np.diag(cm).astype(np.float64)
    gt = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    union = gt + predicted - tp
    present = gt > 0
    absent = np.flatnonzero(~present)
    if absent.size:
        log.info("classes %s absent from ground truth; excluded from class accuracy", absent.tolist())
    recall = tp[present] / gt[present]
    iou = np.full(cm.shape[0], np.nan)
    defined = union > 0
    iou[defined] = tp[defined] / union[defined]
    return EvalReport(
        pixel_accuracy=float(tp.sum() / total),
        class_accuracy=float(recall.mean()),
        mean_iou=float(iou[defined].mean()),
        per_class_iou=[float(v) for v in iou],
        confusion=cm,
    )


def evaluate_predictions(preds, truths, n_labels: int, ignore: int = IGNORE_LABEL) -> EvalReport:
    """Score a sequence of predicted label maps against ground truth, counts pooled."""
    cm = np.zeros((n_labels, n_labels), np.int64)
    count = 0
    for p, t in zip(preds, truths):
        cm += confusion_matrix(p, t, n_labels, ignore)
        count += 1
    if count == 0:
        raise ValueError("empty dataset")
    return report_from_confusion(cm)
