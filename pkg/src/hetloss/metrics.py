"""Accuracy, per-class F1 and support-weighted F1 from a confusion matrix."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    per_class_f1: np.ndarray
    weighted_f1: float
    supports: np.ndarray
    confusion: np.ndarray
    n: int = 0
    empty: bool = False


def confusion_matrix(predictions, truths, n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    p = np.asarray(predictions, dtype=np.int64)
    t = np.asarray(truths, dtype=np.int64)
    return np.bincount(t * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def scores_from_confusion(cm: np.ndarray) -> EvalResult:
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    supports = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    # 2tp / (2tp + fp + fn) is F1 with 0/0 taken as 0
    denom = supports + predicted
    f1 = np.divide(2.0 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    n = int(supports.sum())
    if n == 0:
        return EvalResult(0.0, f1, 0.0, supports, cm, 0, True)
    return EvalResult(float(tp.sum() / n), f1, float(np.dot(supports, f1) / n), supports, cm, n)


def weighted_f1(predictions, truths, n_classes: int | None = None) -> EvalResult:
    """Per-class F1 averaged with weights equal to each class's support.

    ``n_classes`` defaults to one past the largest id seen in either input;
    when it is given, ids outside ``0..n_classes-1`` raise ``ValueError``.
    """
    p = np.asarray(predictions, dtype=np.int64).reshape(-1)
    t = np.asarray(truths, dtype=np.int64).reshape(-1)
    if len(p) != len(t):
        raise ValueError(f"{len(p)} predictions for {len(t)} truths")
    if len(t) == 0:
        raise ValueError("need at least one prediction")
    if min(p.min(), t.min()) < 0:
        raise ValueError("class ids must be non-negative")
    seen = int(max(p.max(), t.max())) + 1
    if n_classes is None:
        n_classes = seen
    elif seen > n_classes:
        raise ValueError(f"class id {seen - 1} outside 0..{n_classes - 1}")
    return scores_from_confusion(confusion_matrix(p, t, n_classes))


@dataclass(frozen=True)
class SubsetEval:
    result: EvalResult
    fraction: float
    count: int
    theta: float

    @property
    def empty(self) -> bool:
        return self.count == 0


def high_confidence_subset_eval(predictions, confidences, truths, theta: float,
                                n_classes: int | None = None) -> SubsetEval:
    """Score only the samples whose confidence is strictly greater than ``theta``.

    An empty subset gives an ``EvalResult`` with ``empty=True`` and zeroed
    scores instead of NaN.
    """
    p = np.asarray(predictions, dtype=np.int64).reshape(-1)
    c = np.asarray(confidences, dtype=np.float64).reshape(-1)
    t = np.asarray(truths, dtype=np.int64).reshape(-1)
    if not len(p) == len(c) == len(t):
        raise ValueError("predictions, confidences and truths must be aligned")
    if n_classes is None:
        n_classes = int(max(p.max(), t.max())) + 1 if len(t) else 2
    keep = c > theta
    count = int(keep.sum())
    frac = count / len(t) if len(t) else 0.0
    if count == 0:
        zero = np.zeros((n_classes, n_classes), dtype=np.int64)
        return SubsetEval(scores_from_confusion(zero), 0.0, 0, theta)
    return SubsetEval(weighted_f1(p[keep], t[keep], n_classes), frac, count, theta)


REPORT_COLUMNS = ("split", "accuracy", "weighted_f1")


def report_rows(named: list[tuple[str, EvalResult]]) -> list[list]:
    n_c = max(len(r.per_class_f1) for _, r in named)
    rows = [list(REPORT_COLUMNS) + [f"f1_class_{c}" for c in range(n_c)]]
    for name, r in named:
        f1s = list(r.per_class_f1) + [0.0] * (n_c - len(r.per_class_f1))
        rows.append([name, f"{r.accuracy:.6f}", f"{r.weighted_f1:.6f}"] + [f"{v:.6f}" for v in f1s])
    return rows


def write_report_csv(named: list[tuple[str, EvalResult]], path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(report_rows(named))


def format_table(named: list[tuple[str, EvalResult]]) -> str:
    rows = report_rows(named)
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(str(v).ljust(w) for v, w in zip(r, widths)) for r in rows)
