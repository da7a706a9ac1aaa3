import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asffnet.errors import ValidationError
from asffnet.evaluation import (
    ConfusionMatrix,
    confusion,
    metrics,
    pr_curve,
    read_curve_csv,
    roc_curve,
    write_curve_csv,
    write_metrics_csv,
)
from oracles import fraction_metrics, mann_whitney, pr_enumeration, tally


def _random_case(rng: random.Random, max_n=50, both=True):
    n = rng.randint(2, max_n)
    # coarse grid so that ties are common
    scores = [rng.choice([rng.random(), round(rng.random(), 1)]) for _ in range(n)]
    labels = [rng.randint(0, 1) for _ in range(n)]
    if both:
        labels[0], labels[1] = 0, 1
    return scores, labels


# ---------------------------------------------------------------------------
# confusion / metrics
# ---------------------------------------------------------------------------


def test_confusion_simple():
    assert confusion([0.9, 0.1], [1, 0]) == ConfusionMatrix(1, 0, 0, 1)


def test_confusion_boundary_is_positive():
    cm = confusion([0.5] * 4, [0, 1, 0, 1], 0.5)
    assert cm.tp + cm.fp == 4


def test_confusion_brute_force():
    rng = random.Random(0)
    scores = [rng.random() for _ in range(200)]
    labels = [rng.randint(0, 1) for _ in range(200)]
    cm = confusion(scores, labels)
    assert (cm.tp, cm.fp, cm.fn, cm.tn) == tally(scores, labels, 0.5)


def test_confusion_validation():
    with pytest.raises(ValidationError):
        confusion([0.1, 0.2], [1])
    with pytest.raises(ValidationError):
        confusion([1.2], [1])
    with pytest.raises(ValidationError):
        confusion([0.2], [2])
    with pytest.raises(ValidationError):
        ConfusionMatrix(-1, 0, 0, 0)


def test_metrics_symmetric_matrix():
    r = metrics(ConfusionMatrix(9, 1, 1, 9))
    for k in ("accuracy", "precision", "recall", "specificity", "f1"):
        assert getattr(r, k) == pytest.approx(0.9, abs=1e-12)
    assert not r.degenerate


def test_metrics_zero_denominator_flagged():
    r = metrics(ConfusionMatrix(0, 0, 5, 5))
    assert r.precision == 0.0 and "precision" in r.degenerate
    assert r.specificity == 1.0
    assert r.accuracy == 0.5
    assert r.f1 == 0.0 and "f1" not in r.degenerate
    assert "recall[0]" not in r.degenerate and "precision[0]" not in r.degenerate


def test_metrics_empty_matrix():
    with pytest.raises(ValidationError):
        metrics(ConfusionMatrix(0, 0, 0, 0))


def test_metrics_exact_fraction_oracle():
    rng = random.Random(1)
    for _ in range(50):
        counts = [rng.randint(0, 30) for _ in range(4)]
        if sum(counts) == 0:
            counts[0] = 1
        r = metrics(ConfusionMatrix(*counts))
        for k, v in fraction_metrics(*counts).items():
            assert getattr(r, k) == float(v), k


def test_macro_is_mean_of_both_orientations():
    tp, fp, fn, tn = 7, 3, 2, 8
    r = metrics(ConfusionMatrix(tp, fp, fn, tn))
    pos, neg = fraction_metrics(tp, fp, fn, tn), fraction_metrics(tn, fn, fp, tp)
    for k in ("precision", "recall", "specificity", "f1"):
        assert getattr(r.macro, k) == pytest.approx(float((pos[k] + neg[k]) / 2), abs=1e-15)


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------


def test_roc_perfect_and_chance():
    assert roc_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]).auc == 1.0
    c = roc_curve([0.4] * 6, [0, 1, 0, 1, 1, 0])
    np.testing.assert_array_equal(c.points, [[0, 0], [1, 1]])
    assert c.auc == 0.5


def test_roc_mann_whitney_oracle():
    rng = random.Random(2)
    scores = [round(rng.random(), 2) for _ in range(100)]
    labels = [rng.randint(0, 1) for _ in range(100)]
    assert abs(roc_curve(scores, labels).auc - mann_whitney(scores, labels)) < 1e-9


def test_pr_perfect_and_prevalence():
    assert pr_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]).auc == 1.0
    c = pr_curve([0.3] * 8, [1, 0, 0, 1, 0, 1, 0, 0])
    assert c.points[-1].tolist() == [1.0, 3 / 8]
    assert c.auc == pytest.approx(3 / 8, abs=1e-15)


def test_pr_enumeration_oracle():
    rng = random.Random(3)
    scores = [round(rng.random(), 2) for _ in range(100)]
    labels = [rng.randint(0, 1) for _ in range(100)]
    assert abs(pr_curve(scores, labels).auc - pr_enumeration(scores, labels)) < 1e-9


def test_curve_point_count_is_unique_plus_one():
    scores = [0.1, 0.4, 0.4, 0.8, 0.8, 0.8, 0.95]
    labels = [0, 1, 0, 1, 0, 1, 1]
    for c in (roc_curve(scores, labels), pr_curve(scores, labels)):
        assert len(c.points) == len(set(scores)) + 1
        assert c.thresholds[0] == np.inf
        assert np.all(np.diff(c.thresholds) < 0)


def test_curve_errors():
    with pytest.raises(ValidationError):
        roc_curve([0.1, 0.2], [1, 1])
    with pytest.raises(ValidationError):
        pr_curve([0.1, 0.2], [0, 0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_curves_monotone_and_bounded(seed):
    scores, labels = _random_case(random.Random(seed))
    roc = roc_curve(scores, labels)
    assert np.all(np.diff(roc.points[:, 0]) >= 0) and np.all(np.diff(roc.points[:, 1]) >= 0)
    assert roc.points[-1].tolist() == [1.0, 1.0]
    pr = pr_curve(scores, labels)
    assert np.all(np.diff(pr.points[:, 0]) >= 0)
    assert 0.0 <= roc.auc <= 1.0 and 0.0 <= pr.auc <= 1.0


def test_curve_csv_round_trip(tmp_path):
    c = roc_curve([0.2, 0.7, 0.7, 0.9], [0, 1, 0, 1])
    write_curve_csv(tmp_path / "roc.csv", c)
    assert (tmp_path / "roc.csv").read_text().splitlines()[0] == "threshold,fpr,tpr"
    rows = read_curve_csv(tmp_path / "roc.csv")
    np.testing.assert_array_equal(rows[:, 1:], c.points)
    assert rows[0, 0] == np.inf


def test_metrics_csv_rows(tmp_path):
    cm = ConfusionMatrix(3, 1, 2, 4)
    write_metrics_csv(tmp_path / "m.csv", "resnet50", cm, metrics(cm), 0.5)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0].startswith("model,averaging,threshold,accuracy,precision,recall,specificity,f1")
    assert lines[1].startswith("resnet50,positive_class,0.5,0.7,0.75,0.6,")
    assert lines[2].startswith("resnet50,macro,")
