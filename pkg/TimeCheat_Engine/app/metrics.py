from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from app import logger
from app.errors import ConfigError, ShapeError, UndefinedMetricError
from app.models import TaskKind


@dataclass
class MetricsReport:
    task: TaskKind
    count: int
    metrics: Dict[str, float] = field(default_factory=dict)

    def __getitem__(self, name: str) -> float:
        return self.metrics[name]

    def to_dict(self) -> Dict:
        return {
            "task": self.task.value,
            "count": self.count,
            "metrics": {name: float(value) for name, value in self.metrics.items()},
        }


def _binary_inputs(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise ShapeError("metrics", scores.shape, labels.shape)
    return scores, labels


# Average ranks (1-based); tied scores share the mean of their positions.
def _average_ranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores), dtype=np.float64)
    start = 0
    while start < len(scores):
        stop = start
        while stop + 1 < len(scores) and sorted_scores[stop + 1] == sorted_scores[start]:
            stop += 1
        ranks[order[start:stop + 1]] = 0.5 * (start + stop) + 1.0
        start = stop + 1
    return ranks


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative; ties count one half."""
    scores, labels = _binary_inputs(scores, labels)
    positives = int(labels.sum())
    negatives = len(labels) - positives
    if positives == 0 or negatives == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative label")
    ranks = _average_ranks(scores)
    statistic = ranks[labels].sum() - positives * (positives + 1) / 2.0
    return float(statistic / (positives * negatives))


def auprc(scores, labels) -> float:
    """Average precision: precision at each distinct threshold weighted by the recall it adds."""
    scores, labels = _binary_inputs(scores, labels)
    positives = int(labels.sum())
    if positives == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive label")
    order = np.argsort(-scores, kind="mergesort")
    ranked_scores = scores[order]
    ranked_labels = labels[order]

    total = 0.0
    seen = 0
    hits = 0
    index = 0
    while index < len(ranked_scores):
        stop = index
        while stop + 1 < len(ranked_scores) and ranked_scores[stop + 1] == ranked_scores[index]:
            stop += 1
        group_hits = int(ranked_labels[index:stop + 1].sum())
        seen += stop - index + 1
        hits += group_hits
        if group_hits:
            total += (hits / seen) * group_hits
        index = stop + 1
    return float(total / positives)


def confusion_matrix(pred_labels, labels, num_classes: Optional[int] = None) -> np.ndarray:
    pred_labels = np.asarray(pred_labels, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred_labels.shape != labels.shape:
        raise ShapeError("confusion_matrix", pred_labels.shape, labels.shape)
    if num_classes is None:
        num_classes = int(max(pred_labels.max(initial=-1), labels.max(initial=-1))) + 1
    for name, values in (("label", labels), ("predicted label", pred_labels)):
        bad = values[(values < 0) | (values >= num_classes)]
        if bad.size:
            raise ConfigError(f"{name} {int(bad[0])} is out of range for {num_classes} classes")
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (labels, pred_labels), 1)
    return matrix


def classification_suite(pred_labels, labels, num_classes: Optional[int] = None) -> Dict[str, float]:
    """Accuracy plus macro-averaged precision, recall and F1."""
    matrix = confusion_matrix(pred_labels, labels, num_classes)
    total = matrix.sum()
    true_positive = np.diag(matrix).astype(np.float64)
    predicted = matrix.sum(axis=0).astype(np.float64)
    actual = matrix.sum(axis=1).astype(np.float64)

    absent = np.flatnonzero((predicted == 0) & (actual == 0))
    if absent.size:
        logger.warning("classes %s absent from predictions and labels; they count as 0 in macro metrics", absent.tolist())

    precision = np.divide(true_positive, predicted, out=np.zeros_like(true_positive), where=predicted > 0)
    recall = np.divide(true_positive, actual, out=np.zeros_like(true_positive), where=actual > 0)
    denominator = precision + recall
    f1 = np.divide(2 * precision * recall, denominator, out=np.zeros_like(true_positive), where=denominator > 0)
    return {
        "accuracy": float(true_positive.sum() / total) if total else 0.0,
        "precision": float(precision.mean()) if precision.size else 0.0,
        "recall": float(recall.mean()) if recall.size else 0.0,
        "f1": float(f1.mean()) if f1.size else 0.0,
    }


def mse_report(preds, targets, mask=None) -> float:
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    mask = np.ones_like(preds) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    if not (preds.shape == targets.shape == mask.shape):
        raise ShapeError("mse_report", preds.shape, targets.shape, mask.shape)
    count = mask.sum()
    if count == 0:
        logger.warning("mse_report: no valid targets; reporting 0")
        return 0.0
    diff = np.where(mask > 0, preds - np.where(mask > 0, targets, preds), 0.0)
    return float(np.sum(mask * diff * diff) / count)
