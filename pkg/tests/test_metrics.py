"""Confusion counts, recall/precision/F-beta/accuracy, and their invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxrnet.metrics import (
    ConfusionCounts,
    TABLE_COLUMNS,
    binary_accuracy,
    compute_metrics,
    confusion,
    f_beta,
    precision,
    recall,
)


def tally_oracle(scores, labels, t):
    """Scalar if/else transcription of the decision rule, independent of numpy."""
    tp = tn = fp = fn = 0
    for s, y in zip(scores, labels):
        pred = s >= t
        if pred and y == 1:
            tp += 1
        elif pred:
            fp += 1
        elif y == 1:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, tn, fp, fn)


# ---- confusion --------------------------------------------------------------------


def test_single_positive_above_threshold():
    assert confusion([0.9], [1], 0.5) == ConfusionCounts(tp=1, tn=0, fp=0, fn=0)


def test_score_at_threshold_predicts_positive():
    assert confusion([0.5], [0], 0.5) == ConfusionCounts(tp=0, tn=0, fp=1, fn=0)


def test_eight_mixed_samples_match_hand_tally():
    scores = [0.1, 0.5, 0.49, 0.91, 0.5, 0.3, 0.77, 0.02]
    labels = [0, 1, 1, 1, 0, 1, 0, 0]
    assert confusion(scores, labels, 0.5) == tally_oracle(scores, labels, 0.5)


def test_confusion_validation():
    with pytest.raises(ValueError, match="labels"):
        confusion([0.5, 0.5], [1], 0.5)
    with pytest.raises(ValueError, match="threshold"):
        confusion([0.5], [1], 1.5)
    with pytest.raises(ValueError, match="labels must be 0 or 1"):
        confusion([0.5], [2], 0.5)


def test_threshold_extremes_allowed():
    c = confusion([0.0, 0.3, 1.0], [1, 1, 0], 0.0)
    assert (c.tp, c.fp, c.fn) == (2, 1, 0)  # everything predicted positive
    assert recall(c) == 1.0


# ---- recall / precision ----------------------------------------------------------------


def test_recall_formula():
    assert recall(ConfusionCounts(tp=3, tn=0, fp=0, fn=1)) == 0.75


def test_recall_zero_over_zero_is_zero():
    assert recall(ConfusionCounts(tp=0, tn=5, fp=2, fn=0)) == 0.0


def test_precision_formula():
    assert precision(ConfusionCounts(tp=3, tn=0, fp=1, fn=0)) == 0.75


def test_precision_no_true_positives():
    assert precision(ConfusionCounts(tp=0, tn=0, fp=5, fn=0)) == 0.0


def test_precision_all_negative_predictions():
    assert precision(ConfusionCounts(tp=0, tn=7, fp=0, fn=3)) == 0.0


# ---- f_beta -------------------------------------------------------------------------------


def test_f_beta_reference_rows():
    assert 0.675 <= f_beta(0.69, 0.63, 0.5) <= 0.680
    assert 0.655 <= f_beta(0.68, 0.58, 0.5) <= 0.660


def test_f_beta_zero_denominator():
    assert f_beta(0.0, 0.0, 0.5) == 0.0


def test_f_beta_validation():
    with pytest.raises(ValueError, match="beta"):
        f_beta(0.5, 0.5, 0.0)
    with pytest.raises(ValueError, match="precision"):
        f_beta(1.2, 0.5, 0.5)
    with pytest.raises(ValueError, match="recall"):
        f_beta(0.5, -0.1, 0.5)


@given(x=st.floats(0.0, 1.0), beta=st.floats(0.01, 10.0))
def test_f_beta_collapses_when_equal(x, beta):
    assert f_beta(x, x, beta) == pytest.approx(x, abs=1e-12)


@given(p=st.floats(0.01, 1.0), r=st.floats(0.01, 1.0), beta=st.floats(0.01, 10.0))
def test_f_beta_between_min_and_max(p, r, beta):
    v = f_beta(p, r, beta)
    assert min(p, r) - 1e-12 <= v <= max(p, r) + 1e-12


@given(p=st.floats(0.01, 1.0), r=st.floats(0.01, 1.0), beta=st.floats(0.01, 0.999))
def test_small_beta_favors_precision(p, r, beta):
    # with beta < 1, putting the larger of the two values on precision never loses
    hi, lo = max(p, r), min(p, r)
    assert f_beta(hi, lo, beta) >= f_beta(lo, hi, beta) - 1e-12


# ---- accuracy -----------------------------------------------------------------------------


def test_accuracy_all_correct():
    assert binary_accuracy(ConfusionCounts(tp=4, tn=6, fp=0, fn=0)) == 1.0


def test_accuracy_even_split():
    assert binary_accuracy(ConfusionCounts(tp=1, tn=1, fp=1, fn=1)) == 0.5


def test_accuracy_random_against_tally():
    rng = np.random.default_rng(0)
    scores = rng.random(20)
    labels = rng.integers(0, 2, 20)
    c = confusion(scores, labels, 0.5)
    o = tally_oracle(scores, labels, 0.5)
    assert c == o
    assert binary_accuracy(c) == (o.tp + o.tn) / 20


def test_accuracy_empty_errors():
    with pytest.raises(ValueError, match="empty"):
        binary_accuracy(ConfusionCounts(0, 0, 0, 0))


# ---- metric rows ---------------------------------------------------------------------


def test_compute_metrics_fields():
    row = compute_metrics([0.9, 0.2, 0.8, 0.4], [1, 0, 0, 1], threshold=0.5, beta=0.5)
    assert row.recall == 0.5
    assert row.precision == 0.5
    assert row.accuracy == 0.5
    assert row.f_beta == pytest.approx(0.5)
    assert not row.degenerate


def test_degenerate_flag_no_positives_in_labels():
    row = compute_metrics([0.1, 0.2], [0, 0])
    assert row.recall == 0.0 and row.degenerate


def test_degenerate_flag_no_predicted_positives():
    row = compute_metrics([0.1, 0.2], [1, 0])
    assert row.precision == 0.0 and row.degenerate


def test_table_column_order():
    assert TABLE_COLUMNS == ("recall", "precision", "f05", "accuracy",
                             "param_count", "train_seconds")


# ---- order invariances ------------------------------------------------------------------


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(0.0, 1.0), st.integers(0, 1)), min_size=1, max_size=40),
       st.randoms(use_true_random=False))
def test_confusion_permutation_invariant(pairs, rnd):
    scores = [p[0] for p in pairs]
    labels = [p[1] for p in pairs]
    shuffled = pairs[:]
    rnd.shuffle(shuffled)
    assert confusion(scores, labels, 0.5) == confusion(
        [p[0] for p in shuffled], [p[1] for p in shuffled], 0.5)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(0.0, 1.0), st.integers(0, 1)), min_size=1, max_size=40),
       st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_raising_threshold_never_raises_tp_or_fp(pairs, t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)
    scores = [p[0] for p in pairs]
    labels = [p[1] for p in pairs]
    c_lo, c_hi = confusion(scores, labels, lo), confusion(scores, labels, hi)
    assert c_hi.tp <= c_lo.tp
    assert c_hi.fp <= c_lo.fp
