"""Evaluation metrics: confusion counts, point metrics, AUROC, AUPRC.

Zero-denominator point metrics report 0 alongside an explicit undefined
flag instead of NaN, so downstream reports stay machine-readable. AUROC is
the Mann-Whitney probability with ties counted 1/2; AUPRC is average
precision with tied scores grouped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MetricError
from .forest import predict_proba_batch

CSV_COLUMNS = (
    "Disease",
    "Accuracy",
    "Precision",
    "Recall",
    "NPV",
    "Specificity",
    "AUROC",
    "AUPRC",
    "F1 score",
)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise MetricError("confusion counts must be non-negative")
        if self.total == 0:
            raise MetricError("confusion counts must sum to a positive total")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricsReport:
    accuracy: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    npv: float = 0.0
    specificity: float = 0.0
    auroc: float = 0.0
    auprc: float = 0.0
    f1: float = 0.0
    undefined: frozenset = field(default_factory=frozenset)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "accuracy", "precision", "recall", "npv", "specificity",
            "auroc", "auprc", "f1",
        )}
        out["undefined"] = sorted(self.undefined)
        return out


def _check_binary(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1 or len(arr) == 0:
        raise MetricError(f"{name} must be a non-empty 1-d sequence")
    if not np.isin(arr, (0, 1)).all():
        raise MetricError(f"{name} entries must be 0 or 1")
    return arr.astype(np.int8)


def confusion(labels, predicted_classes) -> ConfusionCounts:
    y = _check_binary(labels, "labels")
    p = _check_binary(predicted_classes, "predictions")
    if len(y) != len(p):
        raise MetricError(f"length mismatch: {len(y)} labels vs {len(p)} predictions")
    return ConfusionCounts(
        tp=int(((y == 1) & (p == 1)).sum()),
        fp=int(((y == 0) & (p == 1)).sum()),
        tn=int(((y == 0) & (p == 0)).sum()),
        fn=int(((y == 1) & (p == 0)).sum()),
    )


def _ratio(num: int, den: int, name: str, undefined: set) -> float:
    if den == 0:
        undefined.add(name)
        return 0.0
    return num / den


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean; 0 when both inputs are 0."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def point_metrics(c: ConfusionCounts) -> MetricsReport:
    """Threshold metrics from confusion counts (AUROC/AUPRC left at 0)."""
    undefined: set[str] = set()
    precision = _ratio(c.tp, c.tp + c.fp, "precision", undefined)
    recall = _ratio(c.tp, c.tp + c.fn, "recall", undefined)
    npv = _ratio(c.tn, c.tn + c.fn, "npv", undefined)
    specificity = _ratio(c.tn, c.tn + c.fp, "specificity", undefined)
    f1 = f1_score(precision, recall)
    if precision + recall == 0:
        undefined.add("f1")
    return MetricsReport(
        accuracy=(c.tp + c.tn) / c.total,
        precision=precision,
        recall=recall,
        npv=npv,
        specificity=specificity,
        f1=f1,
        undefined=frozenset(undefined),
    )


def auroc(labels, scores) -> float:
    """P(random positive outscores random negative), ties counted 1/2."""
    y = _check_binary(labels, "labels")
    s = np.asarray(scores, dtype=np.float64)
    if len(y) != len(s):
        raise MetricError("labels and scores differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both classes present")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_scores = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # mid-rank, 1-based
        i = j + 1
    rank_sum = float(ranks[y == 1].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auprc(labels, scores) -> float:
    """Average precision over a descending-score sweep, tied scores grouped."""
    y = _check_binary(labels, "labels")
    s = np.asarray(scores, dtype=np.float64)
    if len(y) != len(s):
        raise MetricError("labels and scores differ in length")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    y_sorted = y[order]
    s_sorted = s[order]
    ap = 0.0
    tp = fp = 0
    i = 0
    while i < len(s_sorted):
        j = i
        while j + 1 < len(s_sorted) and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        group_tp = int(y_sorted[i : j + 1].sum())
        tp += group_tp
        fp += (j - i + 1) - group_tp
        precision = tp / (tp + fp)
        ap += precision * (group_tp / n_pos)
        i = j + 1
    return ap


def evaluate(forest, dataset) -> MetricsReport:
    """All eight metrics for a forest on a labeled dataset (threshold 0.5)."""
    if len(dataset) == 0:
        raise MetricError("dataset is empty")
    x, y = dataset.arrays()
    scores = predict_proba_batch(forest, x.astype(np.float64))
    preds = (scores >= 0.5).astype(np.int8)
    report = point_metrics(confusion(y, preds))
    report.auroc = auroc(y, scores)
    report.auprc = auprc(y, scores)
    return report


def csv_header() -> str:
    return ",".join(CSV_COLUMNS)


def csv_row(disease_label: str, report: MetricsReport) -> str:
    cells = [disease_label] + [
        f"{getattr(report, k):.3f}"
        for k in ("accuracy", "precision", "recall", "npv", "specificity",
                  "auroc", "auprc", "f1")
    ]
    return ",".join(cells)
