"""Per-class and support-weighted precision / recall / F1, and the paired
correctness contingency table."""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DegenerateInputError, DimensionError

N_CLASSES = 3


@dataclass(frozen=True)
class ConfusionCounts:
    tp: tuple
    fp: tuple
    fn: tuple
    support: tuple

    @property
    def total(self):
        return sum(self.support)


@dataclass(frozen=True)
class MetricReport:
    precision: tuple
    recall: tuple
    f1: tuple
    weights: tuple
    weighted_f1: float
    weighted_precision: float
    weighted_recall: float


@dataclass(frozen=True)
class ContingencyTable:
    both_correct: int
    only_a_correct: int
    only_b_correct: int
    both_wrong: int

    @property
    def total(self):
        return self.both_correct + self.only_a_correct + self.only_b_correct + self.both_wrong


def _as_labels(name, values):
    arr = np.asarray(values, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= N_CLASSES):
        raise DimensionError(f"{name} contains class ids outside 0..{N_CLASSES - 1}")
    return arr


def confusion(labels, predictions):
    labels = _as_labels("labels", labels)
    predictions = _as_labels("predictions", predictions)
    if labels.shape != predictions.shape:
        raise DimensionError(f"length mismatch: {labels.size} labels vs {predictions.size} predictions")
    cm = kernels.confusion_matrix(labels, predictions, N_CLASSES)
    tp = np.diag(cm)
    return ConfusionCounts(
        tp=tuple(int(v) for v in tp),
        fp=tuple(int(v) for v in cm.sum(axis=0) - tp),
        fn=tuple(int(v) for v in cm.sum(axis=1) - tp),
        support=tuple(int(v) for v in cm.sum(axis=1)),
    )


def _ratio(num, den):
    return num / den if den else 0.0


def weighted_metrics(counts):
    """Support-weighted averages (weights N_c / N, no extra division by C).

    Undefined ratios (0/0) count as 0.
    """
    total = counts.total
    if total == 0:
        raise DegenerateInputError("weighted metrics need at least one sample")
    precision, recall, f1, weights = [], [], [], []
    for c in range(N_CLASSES):
        tp, fp, fn = counts.tp[c], counts.fp[c], counts.fn[c]
        p = _ratio(tp, tp + fp)
        r = _ratio(tp, tp + fn)
        precision.append(p)
        recall.append(r)
        f1.append(_ratio(2.0 * p * r, p + r))
        weights.append(counts.support[c] / total)
    return MetricReport(
        precision=tuple(precision),
        recall=tuple(recall),
        f1=tuple(f1),
        weights=tuple(weights),
        weighted_f1=float(sum(w * v for w, v in zip(weights, f1))),
        weighted_precision=float(sum(w * v for w, v in zip(weights, precision))),
        weighted_recall=float(sum(w * v for w, v in zip(weights, recall))),
    )


def evaluate(labels, predictions):
    return weighted_metrics(confusion(labels, predictions))


def contingency(labels, preds_a, preds_b):
    labels = np.asarray(labels).reshape(-1)
    preds_a = np.asarray(preds_a).reshape(-1)
    preds_b = np.asarray(preds_b).reshape(-1)
    if not labels.size == preds_a.size == preds_b.size:
        raise DimensionError(
            f"length mismatch: labels {labels.size}, A {preds_a.size}, B {preds_b.size}"
        )
    a = preds_a == labels
    b = preds_b == labels
    return ContingencyTable(
        both_correct=int(np.sum(a & b)),
        only_a_correct=int(np.sum(a & ~b)),
        only_b_correct=int(np.sum(~a & b)),
        both_wrong=int(np.sum(~a & ~b)),
    )
