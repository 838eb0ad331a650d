"""Two-class classification metrics: confusion matrix, classification
report, recall-weighted F-beta, and ROC AUC.

Class 0 is Normal, class 1 is Pneumonia. The text rendering mirrors the
shape of a standard classification report (per-class rows, accuracy,
macro and weighted averages) with whole-percent display values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASS_NAMES = ("Normal", "Pneumonia")


class MetricsError(Exception):
    pass


class UndefinedAUCError(MetricsError):
    """AUC asked of a single-class labeling."""


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[actual][predicted] over (Normal, Pneumonia)."""

    counts: tuple[tuple[int, int], tuple[int, int]]

    @property
    def total(self) -> int:
        return sum(sum(row) for row in self.counts)

    def support(self, cls: int) -> int:
        return sum(self.counts[cls])

    def as_array(self) -> np.ndarray:
        return np.array(self.counts, dtype=np.int64)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class ClassificationReport:
    per_class: tuple[ClassMetrics, ClassMetrics]
    accuracy: float
    macro: tuple[float, float, float]       # precision, recall, f1
    weighted: tuple[float, float, float]
    zero_division: bool = False             # some denominator was empty


def confusion(labels, predictions) -> ConfusionMatrix:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape or labels.size < 1:
        raise MetricsError("labels and predictions must be equal-length, non-empty")
    if labels.min() < 0 or labels.max() > 1 or predictions.min() < 0 or predictions.max() > 1:
        raise MetricsError("labels must be binary (0=Normal, 1=Pneumonia)")
    counts = [[0, 0], [0, 0]]
    for a in (0, 1):
        for p in (0, 1):
            counts[a][p] = int(((labels == a) & (predictions == p)).sum())
    return ConfusionMatrix(((counts[0][0], counts[0][1]),
                            (counts[1][0], counts[1][1])))


def _safe_div(num: float, den: float) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def report(cm: ConfusionMatrix) -> ClassificationReport:
    """Precision/recall/F1 per class plus accuracy and averages."""
    total = cm.total
    if total == 0:
        raise MetricsError("empty confusion matrix")
    arr = cm.as_array()
    zero_div = False
    per_class = []
    for cls in (0, 1):
        tp = arr[cls, cls]
        fp = arr[1 - cls, cls]
        fn = arr[cls, 1 - cls]
        precision, z1 = _safe_div(tp, tp + fp)
        recall, z2 = _safe_div(tp, tp + fn)
        f1, z3 = _safe_div(2 * precision * recall, precision + recall)
        zero_div = zero_div or z1 or z2 or z3
        per_class.append(ClassMetrics(precision, recall, f1, int(arr[cls].sum())))

    accuracy = float(np.trace(arr)) / total
    macro = tuple(
        (getattr(per_class[0], k) + getattr(per_class[1], k)) / 2.0
        for k in ("precision", "recall", "f1"))
    weighted = tuple(
        (per_class[0].support * getattr(per_class[0], k)
         + per_class[1].support * getattr(per_class[1], k)) / total
        for k in ("precision", "recall", "f1"))
    return ClassificationReport(tuple(per_class), accuracy, macro, weighted,
                                zero_division=zero_div)


def f_beta(precision: float, recall: float, beta: float) -> float:
    """(1+b^2) P R / (b^2 P + R); zero when the denominator vanishes."""
    if beta <= 0:
        raise MetricsError("beta must be > 0")
    den = beta * beta * precision + recall
    if den == 0:
        return 0.0
    return (1 + beta * beta) * precision * recall / den


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via trapezoids over score thresholds.

    Ties get half credit, so the result equals the Mann-Whitney pairwise
    statistic. Single-class labelings have no defined AUC.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise MetricsError("scores and labels must be equal-length")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("both classes required for AUC")

    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tps = np.cumsum(y == 1)
    fps = np.cumsum(y == 0)
    # keep only the last point of each tied-score block
    keep = np.append(s[1:] != s[:-1], True)
    tpr = np.concatenate([[0.0], tps[keep] / n_pos])
    fpr = np.concatenate([[0.0], fps[keep] / n_neg])
    trapezoid = getattr(np, "trapezoid", np.trapz)
    return float(trapezoid(tpr, fpr))


def percent(value: float) -> int:
    """Whole-percent display rounding (half away from zero)."""
    return int(np.floor(value * 100.0 + 0.5))


def render_report(rep: ClassificationReport) -> str:
    """Aligned plain-text report with whole-percent cells."""
    rows = []
    header = f"{'':<12}{'precision':>10}{'recall':>8}{'f1-score':>10}{'support':>9}"
    rows.append(header)
    rows.append("")
    for name, m in zip(CLASS_NAMES, rep.per_class):
        rows.append(f"{name:<12}{percent(m.precision):>10}{percent(m.recall):>8}"
                    f"{percent(m.f1):>10}{m.support:>9}")
    total = rep.per_class[0].support + rep.per_class[1].support
    rows.append("")
    rows.append(f"{'accuracy':<12}{'':>10}{'':>8}{percent(rep.accuracy):>10}{total:>9}")
    rows.append(f"{'macro avg':<12}{percent(rep.macro[0]):>10}{percent(rep.macro[1]):>8}"
                f"{percent(rep.macro[2]):>10}{total:>9}")
    rows.append(f"{'weighted avg':<12}{percent(rep.weighted[0]):>10}"
                f"{percent(rep.weighted[1]):>8}{percent(rep.weighted[2]):>10}{total:>9}")
    return "\n".join(rows) + "\n"


def report_dict(rep: ClassificationReport) -> dict:
    """Machine-readable report with full-precision values."""
    out: dict = {"accuracy": rep.accuracy, "zero_division": rep.zero_division}
    for name, m in zip(CLASS_NAMES, rep.per_class):
        out[name] = {"precision": m.precision, "recall": m.recall,
                     "f1": m.f1, "support": m.support}
    out["macro avg"] = dict(zip(("precision", "recall", "f1"), rep.macro))
    out["weighted avg"] = dict(zip(("precision", "recall", "f1"), rep.weighted))
    return out
