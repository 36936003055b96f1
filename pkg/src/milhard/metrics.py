"""Bag-level confusion metrics, ROC AUC and mean ± standard error aggregation.

Metrics with a zero denominator are reported as ``None`` and left out of
aggregation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError

METRIC_NAMES = ("accuracy", "precision", "recall", "f_score", "auc", "fpr")
COLUMN_TITLES = ("Accuracy", "Precision", "Recall", "F-score", "AUC", "FPR")


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class RunMetrics:
    accuracy: float | None
    precision: float | None
    recall: float | None
    f_score: float | None
    auc: float | None
    fpr: float | None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunMetrics":
        return cls(**{k: d.get(k) for k in METRIC_NAMES})


@dataclass(frozen=True)
class MetricSummary:
    mean: float | None
    se: float | None
    n: int


@dataclass(frozen=True)
class AggregateReport:
    metrics: dict[str, MetricSummary]
    runs: int

    def to_dict(self) -> dict:
        return {"runs": self.runs, "metrics": {k: asdict(v) for k, v in self.metrics.items()}}


def _check(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    if p.shape != y.shape or p.ndim != 1:
        raise DimensionError(f"probs {p.shape} and labels {y.shape} must be equal-length vectors")
    if p.size == 0:
        raise DimensionError("need at least one prediction")
    return p, y


def confusion(probs, labels, threshold: float = 0.5) -> Confusion:
    """Predict positive when p >= threshold."""
    p, y = _check(probs, labels)
    pred = p >= threshold
    pos = y == 1
    return Confusion(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def auc_counts(probs, labels) -> tuple[int, int] | None:
    """AUC as an exact fraction (numerator, denominator) = (2*wins + ties, 2*P*N)."""
    p, y = _check(probs, labels)
    pos = p[y == 1]
    neg = np.sort(p[y == 0])
    if pos.size == 0 or neg.size == 0:
        return None
    below = np.searchsorted(neg, pos, side="left")
    not_above = np.searchsorted(neg, pos, side="right")
    wins = int(below.sum())
    ties = int((not_above - below).sum())
    return 2 * wins + ties, 2 * pos.size * neg.size


def roc_auc(probs, labels) -> float | None:
    """Mann-Whitney AUC with ties counted as one half; ``None`` for single-class labels."""
    counts = auc_counts(probs, labels)
    if counts is None:
        return None
    num, den = counts
    return num / den


def roc_points(probs, labels) -> list[tuple[float, float, float]]:
    """(threshold, fpr, tpr) at each distinct score, from strictest to loosest, plus the origin."""
    p, y = _check(probs, labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    pts = [(math.inf, 0.0, 0.0)]
    for t in np.unique(p)[::-1]:
        pred = p >= t
        tpr = float(np.sum(pred & (y == 1)) / n_pos) if n_pos else 0.0
        fpr = float(np.sum(pred & (y == 0)) / n_neg) if n_neg else 0.0
        pts.append((float(t), fpr, tpr))
    return pts


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def run_metrics(conf: Confusion, probs, labels) -> RunMetrics:
    precision = _ratio(conf.tp, conf.tp + conf.fp)
    recall = _ratio(conf.tp, conf.tp + conf.fn)
    if precision is None or recall is None or precision + recall == 0:
        f_score = None
    else:
        f_score = 2 * precision * recall / (precision + recall)
    return RunMetrics(
        accuracy=_ratio(conf.tp + conf.tn, conf.total),
        precision=precision,
        recall=recall,
        f_score=f_score,
        auc=roc_auc(probs, labels),
        fpr=_ratio(conf.fp, conf.fp + conf.tn),
    )


def evaluate(probs, labels, threshold: float = 0.5) -> RunMetrics:
    return run_metrics(confusion(probs, labels, threshold), probs, labels)


def aggregate(runs: Sequence[RunMetrics]) -> AggregateReport:
    """Mean and standard error (sample std / sqrt(n)) per metric over the runs where it is defined."""
    if not runs:
        raise DimensionError("aggregate needs at least one run")
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in runs if getattr(r, name) is not None], dtype=np.float64)
        if vals.size == 0:
            out[name] = MetricSummary(None, None, 0)
            continue
        se = 0.0 if vals.size == 1 else float(vals.std(ddof=1) / math.sqrt(vals.size))
        out[name] = MetricSummary(float(vals.mean()), se, int(vals.size))
    return AggregateReport(out, len(runs))


def format_cell(s: MetricSummary) -> str:
    if s.mean is None:
        return "NA"
    return f"{s.mean:.3f}±{s.se:.3f}"


def format_table(reports: dict[str, AggregateReport]) -> str:
    """Aligned text table: Method then the six metric columns, each ``mean±se``."""
    header = ("Method", *COLUMN_TITLES)
    rows = [header] + [(method, *(format_cell(r.metrics[m]) for m in METRIC_NAMES))
                       for method, r in reports.items()]
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths)))
             for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)
