"""Confusion counts, ROC analysis, operating points and the screened-test-set experiment.

Throughout, a score at or above the threshold is a positive prediction, and
operating points are picked among the empirical score thresholds only (no
interpolation along the ROC curve).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset import Frame, FrameLabel
from .nn import ModelParams
from .qa import QAModels, QualityVerdict

TARGETS = (0.8, 0.9, 0.95)


def _rate(num: int, den: int) -> float:
    return num / den if den else math.nan


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def tp_rate(self) -> float:
        return _rate(self.tp, self.tp + self.fn)

    @property
    def fn_rate(self) -> float:
        return _rate(self.fn, self.tp + self.fn)

    @property
    def tn_rate(self) -> float:
        return _rate(self.tn, self.tn + self.fp)

    @property
    def fp_rate(self) -> float:
        return _rate(self.fp, self.tn + self.fp)

    sensitivity = tp_rate
    specificity = tn_rate


def _inputs(scores, labels):
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if len(s) != len(y):
        raise ValueError(f"{len(s)} scores but {len(y)} labels")
    if len(s) == 0:
        raise ValueError("empty input")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(bool)


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionCounts:
    s, y = _inputs(scores, labels)
    pred = s >= threshold
    return ConfusionCounts(
        tp=int((pred & y).sum()), tn=int((~pred & ~y).sum()), fp=int((pred & ~y).sum()), fn=int((~pred & y).sum())
    )


def accuracy(counts: ConfusionCounts) -> float:
    if counts.total == 0:
        raise ValueError("accuracy of an empty sample")
    return (counts.tp + counts.tn) / counts.total


def _sweep(s, y):
    """(threshold, tp, fp) for +inf then every distinct score, descending."""
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    distinct = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), len(s) - 1]
    tp = np.cumsum(y_sorted)[distinct]
    fp = np.cumsum(~y_sorted)[distinct]
    thresholds = np.r_[np.inf, s_sorted[distinct]]
    return thresholds, np.r_[0, tp], np.r_[0, fp]


def _both_classes(y):
    if y.all() or not y.any():
        raise ValueError("both classes must be present")


@dataclass(frozen=True)
class RocCurve:
    fp_rate: np.ndarray
    tp_rate: np.ndarray
    thresholds: np.ndarray

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fp_rate.tolist(), self.tp_rate.tolist()))

    @property
    def auc(self) -> float:
        return float(np.sum(np.diff(self.fp_rate) * (self.tp_rate[1:] + self.tp_rate[:-1]) / 2))


def roc_curve(scores, labels) -> RocCurve:
    s, y = _inputs(scores, labels)
    _both_classes(y)
    thresholds, tp, fp = _sweep(s, y)
    return RocCurve(fp / (~y).sum(), tp / y.sum(), thresholds)


def auc(scores, labels) -> float:
    return roc_curve(scores, labels).auc


@dataclass(frozen=True)
class OperatingPoint:
    target: float
    value: float
    sensitivity: float
    specificity: float
    threshold: float
    met: bool = True

    def __float__(self) -> float:
        return self.value


def _operating_point(scores, labels, target: float, fix: str) -> OperatingPoint:
    if not 0.0 < target <= 1.0:
        raise ValueError("target must lie in (0, 1]")
    s, y = _inputs(scores, labels)
    _both_classes(y)
    thresholds, tp, fp = _sweep(s, y)
    sens = tp / y.sum()
    spec = 1.0 - fp / (~y).sum()
    fixed, free = (spec, sens) if fix == "specificity" else (sens, spec)
    ok = fixed >= target
    if ok.any():
        idx = np.flatnonzero(ok)
        # best free rate; ties broken by the better fixed rate
        i = idx[np.lexsort((-fixed[idx], -free[idx]))[0]]
        met = True
    else:
        i = int(np.argmax(fixed))
        met = False
    return OperatingPoint(target, float(free[i]), float(sens[i]), float(spec[i]), float(thresholds[i]), met)


def sens_at_spec(scores, labels, target_specificity: float) -> OperatingPoint:
    """Highest sensitivity among thresholds whose specificity reaches the target."""
    return _operating_point(scores, labels, target_specificity, "specificity")


def spec_at_sens(scores, labels, target_sensitivity: float) -> OperatingPoint:
    """Highest specificity among thresholds whose sensitivity reaches the target."""
    return _operating_point(scores, labels, target_sensitivity, "sensitivity")


@dataclass(frozen=True)
class MetricsReport:
    n: int
    accuracy: float = math.nan
    confusion: Optional[ConfusionCounts] = None
    roc: Optional[RocCurve] = None
    sens_at_spec: tuple = ()
    spec_at_sens: tuple = ()

    @property
    def empty(self) -> bool:
        return self.n == 0

    @property
    def auc(self) -> float:
        return self.roc.auc if self.roc is not None else math.nan

    def comparable(self) -> tuple:
        """Everything except array identity, for exact equality checks."""
        roc = None if self.roc is None else (tuple(self.roc.points), tuple(self.roc.thresholds.tolist()))
        return (self.n, self.accuracy, self.confusion, roc, self.sens_at_spec, self.spec_at_sens)


def metrics_report(scores, labels, threshold: float = 0.5, targets=TARGETS) -> MetricsReport:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if len(scores) == 0:
        return MetricsReport(0)
    counts = confusion(scores, labels, threshold)
    if labels.min() == labels.max():
        return MetricsReport(len(scores), accuracy(counts), counts)
    return MetricsReport(
        len(scores),
        accuracy(counts),
        counts,
        roc_curve(scores, labels),
        tuple(sens_at_spec(scores, labels, t) for t in targets),
        tuple(spec_at_sens(scores, labels, t) for t in targets),
    )


# -- screened evaluation ------------------------------------------------------------


@dataclass(frozen=True)
class RejectionStats:
    rejected: tuple[str, ...]
    qa_confusion: ConfusionCounts  # positive class = sufficient quality

    @property
    def qa_accuracy(self) -> float:
        return accuracy(self.qa_confusion)


@dataclass(frozen=True)
class ScreenedEval:
    variant: str
    threshold: float
    gated: MetricsReport
    ungated: MetricsReport
    rejection: RejectionStats
    verdicts: tuple[QualityVerdict, ...] = field(default=(), repr=False)


def screened_eval(
    samples: Sequence[tuple[Frame, FrameLabel]],
    qa: QAModels,
    variant: str,
    dbin: Optional[ModelParams],
    threshold: float = 0.5,
    *,
    diag_scores: Optional[Sequence[float]] = None,
    diag_threshold: float = 0.5,
) -> ScreenedEval:
    """Diagnosis metrics on all frames and on the frames ``variant`` accepts.

    ``diag_scores`` may carry precomputed positive-class probabilities in
    sample order; otherwise ``dbin`` scores the frames.
    """
    from .diagnosis import p_positive

    samples = [s for s in samples if s[1].diagnosis in ("positive", "control")]
    if not samples:
        raise ValueError("screened evaluation needs a non-empty labelled test set")
    if diag_scores is None:
        if dbin is None:
            raise ValueError("need either a diagnosis model or precomputed scores")
        diag_scores = p_positive(dbin, samples)
    p = np.asarray(diag_scores, dtype=float)
    if len(p) != len(samples):
        raise ValueError("diag_scores length does not match the samples")
    y = np.array([lab.diagnosis == "positive" for _, lab in samples], dtype=int)
    verdicts = qa.assess([f for f, _ in samples], variant, threshold)
    accepted = np.array([v.accepted for v in verdicts], dtype=bool)
    quality = np.array([lab.quality == "sufficient" for _, lab in samples], dtype=int)
    rejection = RejectionStats(
        tuple(v.frame_id for v in verdicts if not v.accepted),
        confusion(accepted.astype(float), quality, 0.5),
    )
    return ScreenedEval(
        variant,
        threshold,
        gated=metrics_report(p[accepted], y[accepted], diag_threshold),
        ungated=metrics_report(p, y, diag_threshold),
        rejection=rejection,
        verdicts=tuple(verdicts),
    )


def accuracy_by_quality(scores, labels, sufficient, threshold: float = 0.5) -> dict[str, float]:
    """Diagnosis accuracy on sufficient-only and insufficient-only subsets."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    q = np.asarray(sufficient, dtype=bool)
    out = {}
    for name, mask in (("sufficient", q), ("insufficient", ~q)):
        out[name] = accuracy(confusion(s[mask], y[mask], threshold)) if mask.any() else math.nan
    return out


# -- summary table reporting --------------------------------------------------------


@dataclass(frozen=True)
class VariantSummary:
    """Fold-averaged QA and gated-diagnosis metrics for one QA variant."""

    variant: str
    qa_accuracy: float
    qa_rates: tuple[float, float, float, float]  # tp, tn, fp, fn rates
    diag_accuracy: float
    ungated_accuracy: float
    sens_at_spec: tuple[float, ...]
    spec_at_sens: tuple[float, ...]
    accepted: int
    rejected: int


def _nanmean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def summarize(variant: str, folds: Sequence[ScreenedEval]) -> VariantSummary:
    def qa_rate(e: ScreenedEval, name: str) -> float:
        return getattr(e.rejection.qa_confusion, name)

    def op(reports, attr, i):
        return _nanmean([getattr(r, attr)[i].value for r in reports if getattr(r, attr)])

    gated = [e.gated for e in folds if not e.gated.empty]
    return VariantSummary(
        variant,
        _nanmean([e.rejection.qa_accuracy for e in folds]),
        tuple(_nanmean([qa_rate(e, n) for e in folds]) for n in ("tp_rate", "tn_rate", "fp_rate", "fn_rate")),
        _nanmean([r.accuracy for r in gated]),
        _nanmean([e.ungated.accuracy for e in folds]),
        tuple(op(gated, "sens_at_spec", i) for i in range(len(TARGETS))),
        tuple(op(gated, "spec_at_sens", i) for i in range(len(TARGETS))),
        sum(e.gated.n for e in folds),
        sum(len(e.rejection.rejected) for e in folds),
    )


TABLE_COLUMNS = ("variant", "accuracy", "tp_rate", "tn_rate", "fp_rate", "fn_rate",
                 "sens@0.8", "sens@0.9", "sens@0.95", "spec@0.8", "spec@0.9", "spec@0.95")


def _f(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.3f}"


def table_lines(rows: Sequence[VariantSummary]) -> list[str]:
    """Machine-readable rows: QA accuracy and rates, then gated diagnosis operating points."""
    out = [" ".join(TABLE_COLUMNS)]
    for r in rows:
        vals = (r.qa_accuracy, *r.qa_rates, *r.sens_at_spec, *r.spec_at_sens)
        out.append(" ".join([r.variant] + [_f(v) for v in vals]))
    return out


def diagnosis_lines(rows: Sequence[VariantSummary]) -> list[str]:
    out = ["variant gated_accuracy ungated_accuracy accepted rejected"]
    for r in rows:
        out.append(f"{r.variant} {_f(r.diag_accuracy)} {_f(r.ungated_accuracy)} {r.accepted} {r.rejected}")
    return out


def baseline_summary(folds: Sequence[ScreenedEval]) -> VariantSummary:
    """Fold-averaged diagnosis metrics without any quality gate."""
    reports = [e.ungated for e in folds]

    def op(attr, i):
        return _nanmean([getattr(r, attr)[i].value for r in reports if getattr(r, attr)])

    acc = _nanmean([r.accuracy for r in reports])
    return VariantSummary(
        "none", math.nan, (math.nan,) * 4, acc, acc,
        tuple(op("sens_at_spec", i) for i in range(len(TARGETS))),
        tuple(op("spec_at_sens", i) for i in range(len(TARGETS))),
        sum(r.n for r in reports), 0,
    )


def table_text(rows: Sequence[VariantSummary], baseline: Optional[VariantSummary] = None) -> str:
    """Aligned, human-readable summary table."""
    header = (f"{'Method':<9} | {'QA acc':>6} | {'TP, TN, FP, FN':<27} | {'Dx acc':>6} | "
              f"{'Sens @ Spec=0.8, 0.9, 0.95':<26} | {'Spec @ Sens=0.8, 0.9, 0.95':<26}")
    lines = [header, "-" * len(header)]
    for r in rows:
        rates = ", ".join(_f(v) for v in r.qa_rates)
        sens = ", ".join(_f(v) for v in r.sens_at_spec)
        spec = ", ".join(_f(v) for v in r.spec_at_sens)
        lines.append(f"{'QA^' + r.variant:<9} | {_f(r.qa_accuracy):>6} | {rates:<27} | "
                     f"{_f(r.diag_accuracy):>6} | {sens:<26} | {spec:<26}")
    if baseline is not None:
        sens = ", ".join(_f(v) for v in baseline.sens_at_spec)
        spec = ", ".join(_f(v) for v in baseline.spec_at_sens)
        lines.append(f"{'no QA':<9} | {'-':>6} | {'-':<27} | {_f(baseline.diag_accuracy):>6} | "
                     f"{sens:<26} | {spec:<26}")
    return "\n".join(lines) + "\n"
