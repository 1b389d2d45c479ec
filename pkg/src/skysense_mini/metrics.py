"""Evaluation metrics: overall accuracy, IoU, adjusted Rand index."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ClassMetrics:
    class_id: int
    tp: int
    fp: int
    fn: int

    @property
    def iou(self) -> float:
        denom = self.tp + self.fp + self.fn
        return self.tp / denom if denom else float("nan")


@dataclass(frozen=True)
class EvalMetrics:
    overall_accuracy: float
    mean_iou: float
    per_class: tuple[ClassMetrics, ...]
    n_total: int

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "mean_iou": self.mean_iou,
            "n_total": self.n_total,
            "per_class": [
                {"class_id": c.class_id, "tp": c.tp, "fp": c.fp, "fn": c.fn, "iou": c.iou}
                for c in self.per_class
            ],
        }


def confusion_matrix(predictions: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    """[n_classes, n_classes] counts; rows are truth, columns predictions."""
    predictions = np.asarray(predictions).ravel()
    labels = np.asarray(labels).ravel()
    if predictions.shape != labels.shape:
        raise ValueError(f"shape mismatch: {predictions.shape} vs {labels.shape}")
    idx = labels * n_classes + predictions
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def evaluate_predictions(predictions: np.ndarray, labels: np.ndarray,
                         n_classes: int | None = None) -> EvalMetrics:
    """OA = correct/total; IoU = TP/(TP+FP+FN) per class; mIoU = unweighted
    mean over classes present in prediction or truth."""
    predictions = np.asarray(predictions).ravel()
    labels = np.asarray(labels).ravel()
    if predictions.size == 0:
        raise ValueError("cannot evaluate an empty prediction set")
    if n_classes is None:
        n_classes = int(max(predictions.max(), labels.max())) + 1
    cm = confusion_matrix(predictions, labels, n_classes)

    per_class = []
    ious = []
    for c in range(n_classes):
        tp = int(cm[c, c])
        fp = int(cm[:, c].sum() - tp)
        fn = int(cm[c, :].sum() - tp)
        if tp + fp + fn == 0:
            continue  # class absent from both sides: excluded from the mean
        m = ClassMetrics(class_id=c, tp=tp, fp=fp, fn=fn)
        per_class.append(m)
        ious.append(m.iou)

    return EvalMetrics(
        overall_accuracy=float(np.trace(cm) / cm.sum()),
        mean_iou=float(np.mean(ious)) if ious else float("nan"),
        per_class=tuple(per_class),
        n_total=int(cm.sum()),
    )


def adjusted_rand_index(assignment_a: np.ndarray, assignment_b: np.ndarray) -> float:
    """ARI between two labelings, computed from contingency counts."""
    a = np.asarray(assignment_a).ravel()
    b = np.asarray(assignment_b).ravel()
    if a.shape != b.shape or a.size == 0:
        raise ValueError("assignments must be equal-length and nonempty")

    _, a_ids = np.unique(a, return_inverse=True)
    _, b_ids = np.unique(b, return_inverse=True)
    n_a, n_b = a_ids.max() + 1, b_ids.max() + 1
    contingency = np.bincount(a_ids * n_b + b_ids, minlength=n_a * n_b).reshape(n_a, n_b)

    def comb2(x):
        x = np.asarray(x, dtype=np.float64)
        return x * (x - 1) / 2.0

    sum_cells = comb2(contingency).sum()
    sum_rows = comb2(contingency.sum(axis=1)).sum()
    sum_cols = comb2(contingency.sum(axis=0)).sum()
    n_pairs = comb2(a.size)
    expected = sum_rows * sum_cols / n_pairs
    max_index = (sum_rows + sum_cols) / 2.0
    if max_index == expected:
        return 0.0 if sum_cells != max_index else 1.0
    return float((sum_cells - expected) / (max_index - expected))
