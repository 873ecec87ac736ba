"""Pixel confusion matrix, per-class precision/recall/F1 and overall accuracy.

Counts stay integers; division happens only when a score is read.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False     # some quotient was 0/0 and set to 0

    def __iter__(self):
        return iter((self.precision, self.recall, self.f1))


class ConfusionMatrix:
    """Rows are ground-truth classes, columns predicted classes."""

    def __init__(self, num_classes: int = 2, counts: np.ndarray | None = None):
        if num_classes < 2:
            raise ValueError("need at least two classes")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None \
            else np.array(counts, dtype=np.int64)
        if self.counts.shape != (num_classes, num_classes) or (self.counts < 0).any():
            raise ValueError("counts must be a non-negative N x N matrix")

    @classmethod
    def from_counts(cls, counts) -> "ConfusionMatrix":
        counts = np.asarray(counts)
        return cls(counts.shape[0], counts)

    def accumulate(self, predicted, truth) -> "ConfusionMatrix":
        predicted, truth = np.asarray(predicted), np.asarray(truth)
        if predicted.shape != truth.shape:
            raise ValueError(f"mask shapes differ: {predicted.shape} vs {truth.shape}")
        n = self.num_classes
        for name, arr in (("predicted", predicted), ("ground truth", truth)):
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise ValueError(f"{name} mask has class ids outside [0, {n})")
        flat = truth.astype(np.int64).ravel() * n + predicted.astype(np.int64).ravel()
        self.counts += np.bincount(flat, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def true_positives(self, i: int) -> int:
        return int(self.counts[i, i])

    def false_positives(self, i: int) -> int:
        return int(self.counts[:, i].sum() - self.counts[i, i])

    def false_negatives(self, i: int) -> int:
        return int(self.counts[i, :].sum() - self.counts[i, i])


def _ratio(num: int, den: int) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def precision_recall_f1(cm: ConfusionMatrix, i: int) -> ClassScores:
    tp, fp, fn = cm.true_positives(i), cm.false_positives(i), cm.false_negatives(i)
    precision, d1 = _ratio(tp, tp + fp)
    recall, d2 = _ratio(tp, tp + fn)
    # F1 = 2PR/(P+R) = 2TP/(2TP+FP+FN), kept in integers
    f1, d3 = _ratio(2 * tp, 2 * tp + fp + fn)
    return ClassScores(precision, recall, f1, d1 or d2 or d3)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    if total == 0:
        raise ValueError("accuracy of an empty confusion matrix")
    return int(np.trace(cm.counts)) / total


def report_rows(cm: ConfusionMatrix) -> list[dict]:
    rows = []
    for i in range(cm.num_classes):
        s = precision_recall_f1(cm, i)
        rows.append({"class": i, "precision": s.precision, "recall": s.recall, "f1": s.f1,
                     "degenerate": int(s.degenerate)})
    return rows


def report_csv(cm: ConfusionMatrix) -> str:
    """Per-class rows (class, precision, recall, f1) then a summary row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "precision", "recall", "f1", "degenerate"])
    for row in report_rows(cm):
        w.writerow([row["class"], repr(row["precision"]), repr(row["recall"]), repr(row["f1"]), row["degenerate"]])
    w.writerow(["overall_accuracy", "pixel_count"])
    w.writerow([repr(overall_accuracy(cm)), cm.total])
    return buf.getvalue()
