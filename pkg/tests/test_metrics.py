import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lusgate.dataset import Frame, FrameLabel
from lusgate.metrics import (
    ConfusionCounts,
    accuracy,
    accuracy_by_quality,
    auc,
    baseline_summary,
    confusion,
    metrics_report,
    roc_curve,
    screened_eval,
    sens_at_spec,
    spec_at_sens,
    summarize,
    table_lines,
    table_text,
)
from lusgate.qa import QualityVerdict


def test_confusion_worked_example():
    c = confusion([0.8, 0.6, 0.4, 0.2], [1, 0, 1, 0])
    assert c == ConfusionCounts(tp=1, tn=1, fp=1, fn=1)
    assert accuracy(c) == 0.5
    assert (c.tp_rate, c.tn_rate, c.fp_rate, c.fn_rate) == (0.5, 0.5, 0.5, 0.5)


def test_threshold_ties_count_as_positive():
    assert confusion([0.5, 0.5], [1, 0]) == ConfusionCounts(1, 0, 1, 0)


def test_rates_with_an_absent_class_are_nan():
    c = confusion([0.9, 0.1], [1, 1])
    assert c.sensitivity == 0.5 and math.isnan(c.specificity)


@pytest.mark.parametrize("scores, labels", [([0.1], [1, 0]), ([], []), ([0.2, 0.3], [1, 2])])
def test_confusion_input_errors(scores, labels):
    with pytest.raises(ValueError):
        confusion(scores, labels)


def test_accuracy_of_nothing():
    with pytest.raises(ValueError):
        accuracy(ConfusionCounts(0, 0, 0, 0))


def test_roc_worked_example():
    roc = roc_curve([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    assert roc.points == [(0, 0), (0, 0.5), (0.5, 0.5), (0.5, 1), (1, 1)]
    assert roc.auc == 0.75
    assert roc.thresholds[0] == np.inf


def test_operating_point_worked_example():
    op = sens_at_spec([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1], 0.9)
    assert op.value == 0.5 and op.specificity == 1.0 and op.threshold == 0.8 and op.met
    op = spec_at_sens([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1], 0.9)
    assert op.value == 0.5 and op.sensitivity == 1.0 and op.threshold == 0.35


def test_roc_needs_both_classes():
    with pytest.raises(ValueError, match="both classes"):
        roc_curve([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        sens_at_spec([0.1, 0.2], [0, 1], 0.0)


def _brute(scores, labels):
    """ROC points from one confusion matrix per candidate threshold, no sorting tricks."""
    pts = []
    for t in [np.inf] + sorted(set(scores), reverse=True):
        c = confusion(scores, labels, t)
        pts.append((c.fp_rate, c.tp_rate, c.tn_rate, t))
    return pts


def _mann_whitney(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


scored = st.lists(st.tuples(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.7, 0.9, 1.0]) | st.floats(0, 1),
                            st.integers(0, 1)), min_size=2, max_size=40)


@settings(max_examples=200, deadline=None)
@given(scored, st.floats(0.01, 1))
def test_against_brute_force(pairs, target):
    scores = [s for s, _ in pairs]
    labels = [y for _, y in pairs]
    if len(set(labels)) < 2:
        return
    roc = roc_curve(scores, labels)
    brute = _brute(scores, labels)
    np.testing.assert_allclose(roc.fp_rate, [b[0] for b in brute])
    np.testing.assert_allclose(roc.tp_rate, [b[1] for b in brute])
    assert roc.auc == pytest.approx(_mann_whitney(scores, labels), abs=1e-12)
    assert auc(scores, labels) == roc.auc

    ok = [b for b in brute if b[2] >= target]
    op = sens_at_spec(scores, labels, target)
    if ok:
        assert op.met and op.value == pytest.approx(max(b[1] for b in ok))
        assert op.specificity >= target
    else:
        assert not op.met
    ok = [b for b in brute if b[1] >= target]
    op = spec_at_sens(scores, labels, target)
    assert op.met and op.value == pytest.approx(max(b[2] for b in ok))


@settings(max_examples=100, deadline=None)
@given(scored)
def test_sens_at_spec_is_non_increasing_in_the_target(pairs):
    scores = [s for s, _ in pairs]
    labels = [y for _, y in pairs]
    if len(set(labels)) < 2:
        return
    values = [sens_at_spec(scores, labels, t).value for t in np.linspace(0.02, 1, 50)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_metrics_report_shapes():
    r = metrics_report([0.9, 0.2, 0.7], [1, 0, 0])
    assert r.n == 3 and r.accuracy == pytest.approx(2 / 3) and len(r.sens_at_spec) == 3
    assert metrics_report([], []).empty
    single = metrics_report([0.9, 0.8], [1, 1])
    assert single.roc is None and math.isnan(single.auc) and single.accuracy == 1.0


# -- screened evaluation with a stand-in QA -------------------------------------------


class FakeQA:
    """Fixed per-frame quality scores, so acceptance is known in advance."""

    def __init__(self, scores):
        self.scores = scores

    def assess(self, frames, variant="bin", threshold=0.5):
        out = []
        for f in frames:
            p = self.scores[f.frame_id]
            out.append(QualityVerdict(f.frame_id, p, p, p, threshold, p >= threshold))
        return out


def _samples():
    rows = [  # frame, quality, diagnosis, qa score, diagnosis score
        ("a", "sufficient", "positive", 0.9, 0.8),
        ("b", "sufficient", "control", 0.8, 0.3),
        ("c", "insufficient", "positive", 0.2, 0.1),
        ("d", "insufficient", "control", 0.1, 0.9),
        ("e", "sufficient", "positive", 0.4, 0.7),
        ("f", "insufficient", "unknown", 0.1, 0.5),
    ]
    samples = [(Frame(np.zeros((4, 4)), fid, "p"), FrameLabel(q, d)) for fid, q, d, _, _ in rows]
    qa = FakeQA({fid: s for fid, _, _, s, _ in rows})
    diag = [ds for _, _, d, _, ds in rows if d != "unknown"]
    return samples, qa, diag


def test_screened_eval_gates_and_counts():
    samples, qa, diag = _samples()
    e = screened_eval(samples, qa, "bin", None, 0.5, diag_scores=diag)
    # unlabelled frames are dropped; "a" and "b" pass the gate
    assert e.ungated.n == 5 and e.gated.n == 2
    assert e.gated.accuracy == 1.0
    assert e.ungated.accuracy == pytest.approx(3 / 5)
    assert e.rejection.rejected == ("c", "d", "e")
    # QA sees sufficient as positive: a, b accepted (tp); e rejected (fn); c, d rejected (tn)
    assert e.rejection.qa_confusion == ConfusionCounts(tp=2, tn=2, fp=0, fn=1)
    assert e.rejection.qa_accuracy == 0.8


def test_zero_threshold_gate_equals_no_gate():
    samples, qa, diag = _samples()
    e = screened_eval(samples, qa, "bin", None, 0.0, diag_scores=diag)
    assert e.gated.comparable() == e.ungated.comparable()
    assert e.rejection.rejected == ()


def test_screened_eval_errors():
    samples, qa, diag = _samples()
    with pytest.raises(ValueError, match="length"):
        screened_eval(samples, qa, "bin", None, diag_scores=diag[:-1])
    with pytest.raises(ValueError, match="diagnosis model"):
        screened_eval(samples, qa, "bin", None)
    with pytest.raises(ValueError, match="non-empty"):
        screened_eval(samples[-1:], qa, "bin", None, diag_scores=[])


def test_summaries_and_table():
    samples, qa, diag = _samples()
    folds = [screened_eval(samples, qa, "bin", None, t, diag_scores=diag) for t in (0.5, 0.3)]
    s = summarize("bin", folds)
    assert s.qa_accuracy == pytest.approx((0.8 + 1.0) / 2)
    assert s.accepted == 2 + 3 and s.rejected == 3 + 2
    base = baseline_summary(folds)
    assert base.variant == "none" and base.diag_accuracy == pytest.approx(0.6)
    lines = table_lines([s])
    assert lines[0].split()[0] == "variant" and len(lines[1].split()) == len(lines[0].split())
    text = table_text([s], base)
    assert "QA^bin" in text and "no QA" in text
    widths = {len(line) for line in text.splitlines() if "|" in line}
    assert len(widths) == 1


def test_accuracy_by_quality():
    out = accuracy_by_quality([0.9, 0.1, 0.9, 0.9], [1, 0, 0, 1], [True, True, False, False])
    assert out == {"sufficient": 1.0, "insufficient": 0.5}
