"""Binary classification metrics: confusion counts, the five summary rates,
ROC and precision-recall curves.

The malignant class (label 1) is the positive class. Predictions use the
rule ``score >= threshold``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from asffnet.errors import ValidationError

METRIC_NAMES = ("accuracy", "precision", "recall", "specificity", "f1")
ROC_AUC_RULE = "trapezoidal"
PR_AUC_RULE = "step (sum of recall increments times precision at the new recall)"


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValidationError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ClassRates:
    precision: float
    recall: float
    specificity: float
    f1: float


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    specificity: float
    f1: float
    macro: ClassRates
    per_class: dict[int, ClassRates]
    degenerate: frozenset[str] = field(default_factory=frozenset)

    def positive_row(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def macro_row(self) -> dict[str, float]:
        return {"accuracy": self.accuracy, **{k: getattr(self.macro, k) for k in METRIC_NAMES[1:]}}


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValidationError(f"{s.size} scores but {y.size} labels")
    if s.size == 0:
        raise ValidationError("need at least one sample")
    if not np.isfinite(s).all():
        raise ValidationError("scores must be finite")
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionMatrix:
    s, y = _as_arrays(scores, labels)
    if (s < 0).any() or (s > 1).any():
        raise ValidationError("scores must be probabilities in [0, 1]")
    pred = s >= threshold
    pos = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
    )


def _ratio(num: int, den: int, name: str, flags: set) -> float:
    if den == 0:
        flags.add(name)
        return 0.0
    return num / den


def _rates(tp, fp, fn, tn, suffix, flags) -> ClassRates:
    p = _ratio(tp, tp + fp, "precision" + suffix, flags)
    r = _ratio(tp, tp + fn, "recall" + suffix, flags)
    sp = _ratio(tn, tn + fp, "specificity" + suffix, flags)
    # 2pr / (p + r) reduced to counts: one correctly rounded division
    f1 = _ratio(2 * tp, 2 * tp + fp + fn, "f1" + suffix, flags)
    return ClassRates(p, r, sp, f1)


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy plus precision / recall / specificity / F1 for the positive
    class, for each class taken as positive, and their macro average.

    Zero-denominator ratios are reported as 0 and named in ``degenerate``
    (per-class entries carry a ``[0]`` / ``[1]`` suffix).
    """
    if cm.total == 0:
        raise ValidationError("confusion matrix is empty")
    flags: set[str] = set()
    pos = _rates(cm.tp, cm.fp, cm.fn, cm.tn, "", flags)
    per_class = {
        1: pos,
        0: _rates(cm.tn, cm.fn, cm.fp, cm.tp, "[0]", flags),
    }
    macro = ClassRates(*(
        (getattr(per_class[0], k) + getattr(per_class[1], k)) / 2
        for k in ("precision", "recall", "specificity", "f1")
    ))
    return MetricsReport(
        accuracy=(cm.tp + cm.tn) / cm.total,
        precision=pos.precision,
        recall=pos.recall,
        specificity=pos.specificity,
        f1=pos.f1,
        macro=macro,
        per_class=per_class,
        degenerate=frozenset(flags),
    )


@dataclass(frozen=True)
class Curve:
    kind: str
    points: np.ndarray  # (K, 2): (x, y)
    thresholds: np.ndarray  # (K,), first entry +inf
    auc: float
    auc_rule: str


def _sweep(scores, labels):
    """Cumulative (tp, fp) at thresholds +inf followed by each distinct score, descending."""
    s, y = _as_arrays(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # keep the last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    thresholds = np.r_[np.inf, s[last]]
    return thresholds, np.r_[0, tp[last]], np.r_[0, fp[last]], int(y.sum()), int((1 - y).sum())


def roc_curve(scores, labels) -> Curve:
    thresholds, tp, fp, n_pos, n_neg = _sweep(scores, labels)
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("ROC needs both positive and negative labels")
    fpr, tpr = fp / n_neg, tp / n_pos
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return Curve("roc", np.column_stack([fpr, tpr]), thresholds, auc, ROC_AUC_RULE)


def pr_curve(scores, labels) -> Curve:
    """Points are (recall, precision). At the +inf threshold precision is 1."""
    thresholds, tp, fp, n_pos, _ = _sweep(scores, labels)
    if n_pos == 0:
        raise ValidationError("precision-recall needs at least one positive label")
    recall = tp / n_pos
    predicted = tp + fp
    precision = np.ones_like(recall)
    np.divide(tp, predicted, out=precision, where=predicted > 0)
    auc = float(np.sum(np.diff(recall) * precision[1:]))
    return Curve("pr", np.column_stack([recall, precision]), thresholds, auc, PR_AUC_RULE)


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------

METRICS_COLUMNS = (
    "model", "averaging", "threshold", *METRIC_NAMES, "tp", "fp", "fn", "tn", "degenerate",
)


def metrics_rows(model: str, cm: ConfusionMatrix, report: MetricsReport, threshold: float):
    counts = {"tp": cm.tp, "fp": cm.fp, "fn": cm.fn, "tn": cm.tn}
    degenerate = ";".join(sorted(report.degenerate))
    for averaging, row in (("positive_class", report.positive_row()), ("macro", report.macro_row())):
        yield {
            "model": model, "averaging": averaging, "threshold": repr(float(threshold)),
            **{k: repr(float(v)) for k, v in row.items()}, **counts, "degenerate": degenerate,
        }


def write_metrics_csv(path, model: str, cm: ConfusionMatrix, report: MetricsReport, threshold: float):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, METRICS_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(metrics_rows(model, cm, report, threshold))


def write_curve_csv(path, curve: Curve) -> None:
    x_name, y_name = ("fpr", "tpr") if curve.kind == "roc" else ("recall", "precision")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", x_name, y_name])
        for t, (x, y) in zip(curve.thresholds, curve.points):
            w.writerow([repr(float(t)), repr(float(x)), repr(float(y))])


def read_curve_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in r] for r in rows])
