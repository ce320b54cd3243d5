"""Confusion matrix and per-class classification report.

Rates are kept at full precision; rounding to two decimals happens only when
rendering.  Undefined precision or recall (zero denominator) is reported as
0 and the class is listed in ``zero_division``.

JSON report schema::

    {
      "classes": [{"name": str, "precision": float, "recall": float,
                   "f1": float, "support": int}, ...],
      "accuracy": float,
      "macro_avg": {"precision": float, "recall": float, "f1": float},
      "weighted_avg": {"precision": float, "recall": float, "f1": float},
      "total": int,
      "zero_division": [str, ...],
      "confusion_matrix": [[int, ...], ...] | null
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    names: list[str]

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        c = self.counts.shape[0]
        if self.counts.shape != (c, c):
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion matrix counts must be non-negative")
        if len(self.names) != c:
            raise ValueError(f"{len(self.names)} names for {c} classes")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def supports(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def confusion_matrix(
    true: Sequence[int], pred: Sequence[int], num_classes: int, names: Sequence[str] | None = None
) -> ConfusionMatrix:
    """cell[t, p] counts samples of true class t predicted as p."""
    t = np.asarray(true, dtype=np.int64).reshape(-1)
    p = np.asarray(pred, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.size} true vs {p.size} predicted")
    for arr, label in ((t, "true"), (p, "predicted")):
        bad = (arr < 0) | (arr >= num_classes)
        if bad.any():
            raise ValueError(f"{label} class id {int(arr[bad][0])} out of range [0, {num_classes})")
    counts = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    names = list(names) if names is not None else [str(i) for i in range(num_classes)]
    return ConfusionMatrix(counts.reshape(num_classes, num_classes), names)


@dataclass
class ClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class Averages:
    precision: float
    recall: float
    f1: float


@dataclass
class ClassificationReport:
    classes: list[ClassMetrics]
    accuracy: float
    macro_avg: Averages
    weighted_avg: Averages
    total: int
    zero_division: list[str] = field(default_factory=list)
    confusion_matrix: list[list[int]] | None = None

    def to_dict(self) -> dict:
        return {
            "classes": [vars(c).copy() for c in self.classes],
            "accuracy": self.accuracy,
            "macro_avg": vars(self.macro_avg).copy(),
            "weighted_avg": vars(self.weighted_avg).copy(),
            "total": self.total,
            "zero_division": list(self.zero_division),
            "confusion_matrix": self.confusion_matrix,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassificationReport":
        return cls(
            classes=[ClassMetrics(**c) for c in d["classes"]],
            accuracy=d["accuracy"],
            macro_avg=Averages(**d["macro_avg"]),
            weighted_avg=Averages(**d["weighted_avg"]),
            total=d["total"],
            zero_division=list(d.get("zero_division", [])),
            confusion_matrix=d.get("confusion_matrix"),
        )


def _safe_div(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    zero = den == 0
    return np.divide(num, den, out=np.zeros_like(num), where=~zero), zero


def f1_score(precision, recall) -> np.ndarray:
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    out, _ = _safe_div(2 * precision * recall, precision + recall)
    return out


def aggregate(
    precision: Sequence[float],
    recall: Sequence[float],
    f1: Sequence[float],
    support: Sequence[int],
) -> tuple[Averages, Averages]:
    """Macro (unweighted) and support-weighted means of per-class rates."""
    rates = np.array([precision, recall, f1], dtype=np.float64)
    w = np.asarray(support, dtype=np.float64)
    macro = rates.mean(axis=1)
    weighted = rates @ w / w.sum() if w.sum() > 0 else np.zeros(3)
    return Averages(*map(float, macro)), Averages(*map(float, weighted))


def classification_report(cm: ConfusionMatrix) -> ClassificationReport:
    counts = cm.counts
    if counts.size == 0 or cm.total == 0:
        raise ValueError("classification report needs at least one scored sample")
    tp = np.diag(counts)
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    precision, p_zero = _safe_div(tp, predicted)
    recall, r_zero = _safe_div(tp, support)
    f1 = f1_score(precision, recall)
    macro, weighted = aggregate(precision, recall, f1, support)
    classes = [
        ClassMetrics(name, float(precision[i]), float(recall[i]), float(f1[i]), int(support[i]))
        for i, name in enumerate(cm.names)
    ]
    zero = [name for i, name in enumerate(cm.names) if p_zero[i] or r_zero[i]]
    return ClassificationReport(
        classes=classes,
        accuracy=float(tp.sum() / cm.total),
        macro_avg=macro,
        weighted_avg=weighted,
        total=cm.total,
        zero_division=zero,
        confusion_matrix=counts.tolist(),
    )


def render_report(report: ClassificationReport, fmt: str = "text") -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2)
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")

    width = max([len("weighted avg")] + [len(c.name) for c in report.classes])
    head = f"{'':>{width}}  {'precision':>9}  {'recall':>9}  {'f1-score':>9}  {'support':>9}"
    lines = [head, ""]
    for c in report.classes:
        mark = "*" if c.name in report.zero_division else " "
        lines.append(
            f"{c.name:>{width}}  {c.precision:>9.2f}  {c.recall:>9.2f}  {c.f1:>9.2f}  {c.support:>9d}{mark}".rstrip()
        )
    lines.append("")
    lines.append(f"{'accuracy':>{width}}  {'':>9}  {'':>9}  {report.accuracy:>9.2f}  {report.total:>9d}")
    for label, avg in (("macro avg", report.macro_avg), ("weighted avg", report.weighted_avg)):
        lines.append(
            f"{label:>{width}}  {avg.precision:>9.2f}  {avg.recall:>9.2f}  {avg.f1:>9.2f}  {report.total:>9d}"
        )
    if report.zero_division:
        lines.append("")
        lines.append(
            "* precision or recall undefined (division by zero) for: "
            + ", ".join(report.zero_division)
            + "; reported as 0.00"
        )
    return "\n".join(lines) + "\n"


def render_confusion_matrix(cm: ConfusionMatrix) -> str:
    width = max(7, *(len(n) for n in cm.names))
    cell = max(6, len(str(cm.counts.max(initial=0))) + 1)
    corner = "true/pred"
    width = max(width, len(corner))
    lines = [f"{corner:>{width}}" + "".join(f"{i:>{cell}d}" for i in range(len(cm.names)))]
    for i, name in enumerate(cm.names):
        lines.append(f"{name:>{width}}" + "".join(f"{v:>{cell}d}" for v in cm.counts[i]))
    return "\n".join(lines) + "\n"
