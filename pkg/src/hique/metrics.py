"""Binary classification metrics: macro/weighted precision, recall, F1 and G-mean.

Class 0 is ``normal``, class 1 is ``depression``. A class that is never
predicted has precision 0 (and hence F1 0).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DataValidationError


@dataclass(frozen=True)
class Metrics:
    confusion: tuple[tuple[int, int], tuple[int, int]]  # rows = truth, cols = prediction
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    g_mean: float
    accuracy: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = [list(r) for r in self.confusion]
        return d


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


def confusion_matrix(labels: Sequence[int], predictions: Sequence[int]) -> np.ndarray:
    cm = np.zeros((2, 2), dtype=np.int64)
    for y, p in zip(labels, predictions):
        if y not in (0, 1) or p not in (0, 1):
            raise DataValidationError(f"labels must be binary, got ({y}, {p})")
        cm[y, p] += 1
    return cm


def metrics_from_confusion(cm) -> Metrics:
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise DataValidationError("cannot compute metrics on an empty evaluation set")
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    precision = [_safe_div(cm[c, c], predicted[c]) for c in (0, 1)]
    recall = [_safe_div(cm[c, c], support[c]) for c in (0, 1)]
    f1 = [_safe_div(2 * p * r, p + r) for p, r in zip(precision, recall)]
    weights = support / total

    return Metrics(
        confusion=tuple(tuple(int(v) for v in row) for row in cm),
        macro_precision=float(np.mean(precision)),
        macro_recall=float(np.mean(recall)),
        macro_f1=float(np.mean(f1)),
        weighted_precision=float(np.dot(weights, precision)),
        weighted_recall=float(np.dot(weights, recall)),
        weighted_f1=float(np.dot(weights, f1)),
        g_mean=math.sqrt(recall[0] * recall[1]),
        accuracy=float(np.trace(cm) / total),
    )


def compute_metrics(predictions: Iterable[tuple[int, int]]) -> Metrics:
    """Metrics from ``(true_label, predicted_label)`` pairs."""
    pairs = list(predictions)
    if not pairs:
        raise DataValidationError("cannot compute metrics on an empty evaluation set")
    labels, preds = zip(*pairs)
    return metrics_from_confusion(confusion_matrix(labels, preds))
