from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milhard.errors import DimensionError
from milhard.metrics import (
    Confusion,
    MetricSummary,
    RunMetrics,
    aggregate,
    auc_counts,
    confusion,
    evaluate,
    format_cell,
    format_table,
    roc_auc,
    roc_points,
    run_metrics,
)


def pair_auc(probs, labels):
    """Enumerate every (positive, negative) pair."""
    pos = [p for p, y in zip(probs, labels) if y == 1]
    neg = [p for p, y in zip(probs, labels) if y == 0]
    wins = sum(1 for a in pos for b in neg if a > b)
    ties = sum(1 for a in pos for b in neg if a == b)
    return Fraction(2 * wins + ties, 2 * len(pos) * len(neg))


def metrics_of(tp, fp, tn, fn):
    probs = [0.9] * tp + [0.9] * fp + [0.1] * tn + [0.1] * fn
    labels = [1] * tp + [0] * fp + [0] * tn + [1] * fn
    return run_metrics(Confusion(tp, fp, tn, fn), probs, labels)


class TestConfusion:
    def test_examples(self):
        assert confusion([0.9, 0.1], [1, 0]) == Confusion(1, 0, 1, 0)
        assert confusion([0.5], [0]) == Confusion(0, 1, 0, 0)
        assert confusion([0.6, 0.6, 0.4], [1, 0, 1]) == Confusion(tp=1, fp=1, tn=0, fn=1)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            confusion([0.1, 0.2], [1])


class TestRunMetrics:
    def test_perfect(self):
        m = evaluate([0.9, 0.8, 0.2], [1, 1, 0])
        assert m == RunMetrics(1.0, 1.0, 1.0, 1.0, 1.0, 0.0)

    def test_all_positive(self):
        m = evaluate([0.7] * 4, [1, 1, 0, 0])
        assert (m.recall, m.fpr, m.accuracy) == (1.0, 1.0, 0.5)

    def test_formulas(self):
        m = metrics_of(3, 1, 4, 2)
        assert m.precision == 0.75
        assert m.recall == 0.6
        assert m.f_score == pytest.approx(2 / 3)
        assert round(m.f_score, 5) == 0.66667
        assert m.fpr == 0.2
        specificity = 4 / (4 + 1)
        assert m.fpr == pytest.approx(1 - specificity)

    def test_undefined(self):
        m = evaluate([0.1, 0.2], [0, 0])
        assert m.precision is None and m.recall is None and m.f_score is None and m.auc is None
        assert m.fpr == 0.0 and m.accuracy == 1.0


class TestAUC:
    def test_examples(self):
        assert roc_auc([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]) == 1.0
        assert roc_auc([0.4] * 6, [1, 0, 1, 0, 1, 0]) == 0.5
        assert roc_auc([0.9, 0.3, 0.8, 0.1], [1, 1, 0, 0]) == 0.75

    def test_single_class(self):
        assert roc_auc([0.2, 0.3], [1, 1]) is None

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 10).map(lambda k: k / 10), st.integers(0, 1)), min_size=2, max_size=50))
    def test_pair_enumeration(self, data):
        probs, labels = zip(*data)
        if len(set(labels)) < 2:
            assert auc_counts(probs, labels) is None
            return
        num, den = auc_counts(probs, labels)
        assert Fraction(num, den) == pair_auc(probs, labels)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 1024), min_size=4, max_size=30, unique=True), st.integers(0, 2**31))
    def test_complement_and_monotone(self, ticks, seed):
        labels = np.random.default_rng(seed).permutation([i % 2 for i in range(len(ticks))])
        # dyadic grid, so 1 - p is exact and stays tie-free
        p = np.array(ticks) / 1024
        a = auc_counts(p, labels)
        b = auc_counts(1 - p, labels)
        assert a[0] + b[0] == a[1]
        assert roc_auc(p ** 3 + 2 * p, labels) == roc_auc(p, labels)

    def test_roc_points(self):
        pts = roc_points([0.9, 0.3, 0.8, 0.1], [1, 1, 0, 0])
        assert pts[0][1:] == (0.0, 0.0)
        assert pts[-1][1:] == (1.0, 1.0)
        fprs = [p[1] for p in pts]
        assert fprs == sorted(fprs)
        # trapezoid area under a step ROC without ties equals AUC
        area = sum((f2 - f1) * t1 for (_, f1, t1), (_, f2, _) in zip(pts, pts[1:]))
        assert area == pytest.approx(0.75)


class TestAggregate:
    def run(self, acc):
        return RunMetrics(acc, None, 1.0, None, 0.5, 0.0)

    def test_constant(self):
        r = aggregate([self.run(0.9)] * 3)
        assert r.metrics["accuracy"].mean == pytest.approx(0.9)
        assert r.metrics["accuracy"].se == pytest.approx(0.0, abs=1e-15)

    def test_two_runs(self):
        r = aggregate([self.run(0.8), self.run(1.0)])
        assert r.metrics["accuracy"].mean == pytest.approx(0.9)
        assert r.metrics["accuracy"].se == pytest.approx(0.1)

    def test_single_and_undefined(self):
        r = aggregate([self.run(0.7)])
        assert (r.metrics["accuracy"].mean, r.metrics["accuracy"].se) == (0.7, 0.0)
        assert r.metrics["precision"] == MetricSummary(None, None, 0)
        assert r.runs == 1

    def test_partial_undefined(self):
        runs = [RunMetrics(0.5, 0.4, 1, 1, 1, 0), RunMetrics(0.5, None, 1, 1, 1, 0)]
        assert aggregate(runs).metrics["precision"] == MetricSummary(0.4, 0.0, 1)

    def test_empty(self):
        with pytest.raises(DimensionError):
            aggregate([])


def test_table_layout():
    r = aggregate([TestAggregate().run(0.8), TestAggregate().run(1.0)])
    lines = format_table({"ours": r, "base-λ1": r}).splitlines()
    assert lines[0].split() == ["Method", "Accuracy", "Precision", "Recall", "F-score", "AUC", "FPR"]
    assert lines[2].split()[:3] == ["ours", "0.900±0.100", "NA"]
    assert len(lines) == 4
    assert format_cell(MetricSummary(0.12345, 0.0004, 2)) == "0.123±0.000"
