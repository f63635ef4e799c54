import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobilecaps.autodiff import Parameter, Tensor, backward, finite_diff_check, ops
from mobilecaps.losses import MarginLossConfig, cross_entropy, logcosh_loss, margin_loss
from mobilecaps.metrics import (
    EvalReport,
    average_reports,
    classification_report,
    confusion_and_prf,
    confusion_matrix,
    r2_score,
    rale_category,
    rale_to_severity,
    roc_auc_binary,
    roc_auc_ovr,
    roc_curve,
    severity_report,
    severity_to_rale,
)

from .oracles import auc_pairs


def t64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


ONE_HOT_0 = np.array([[1.0, 0, 0]])


# --- margin loss --------------------------------------------------------------------


def test_margin_loss_examples():
    assert margin_loss(t64([[0.95, 0.05, 0.05]]), ONE_HOT_0).item() == 0
    assert abs(margin_loss(t64([[0.0, 1.0, 1.0]]), ONE_HOT_0).item() - 1.62) < 1e-12
    assert margin_loss(t64([[0.9, 0.1, 0.1]]), ONE_HOT_0).item() == 0


def test_margin_loss_batch_mean():
    lengths = t64([[0.95, 0.05, 0.05], [0.0, 1.0, 1.0]])
    assert abs(margin_loss(lengths, np.eye(3)[[0, 0]]).item() - 0.81) < 1e-12


def test_margin_loss_rejects_non_one_hot():
    with pytest.raises(ValueError):
        margin_loss(t64([[0.5, 0.5]]), np.array([[1, 1]]))
    with pytest.raises(ValueError):
        margin_loss(t64([[0.5, 0.5]]), np.array([[0.5, 0.5]]))


def test_margin_config_validation():
    with pytest.raises(ValueError):
        MarginLossConfig(m_plus=0.1, m_minus=0.9)
    with pytest.raises(ValueError):
        MarginLossConfig(lam=0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 0.999), min_size=3, max_size=3), st.integers(0, 2))
def test_margin_loss_nonnegative_and_zero_iff_inside_margins(lengths, k):
    t = np.eye(3)[[k]]
    loss = margin_loss(t64([lengths]), t).item()
    assert loss >= 0
    inside = lengths[k] >= 0.9 and all(v <= 0.1 for i, v in enumerate(lengths) if i != k)
    assert (loss == 0) == inside


def test_margin_loss_gradient():
    rng = np.random.default_rng(0)
    p = Parameter(rng.uniform(0.02, 0.98, size=(4, 3)), dtype=np.float64)
    t = np.eye(3)[[0, 1, 2, 1]]
    assert finite_diff_check(lambda: margin_loss(p, t), p).passed


# --- log-cosh -----------------------------------------------------------------------


def test_logcosh_examples():
    assert logcosh_loss(t64([0.3, -0.2]), [0.3, -0.2]).item() == 0
    assert abs(logcosh_loss(t64([1.0]), [0.0]).item() - 0.433781) < 1e-6
    assert abs(logcosh_loss(t64([50.0]), [0.0]).item() - (50 - math.log(2))) < 1e-6
    assert abs(logcosh_loss(t64([1000.0]), [0.0]).item() - (1000 - math.log(2))) < 1e-9


def test_logcosh_mean_reduction_and_mismatch():
    assert abs(logcosh_loss(t64([1.0, 0.0]), [0.0, 0.0], "mean").item() - 0.433781 / 2) < 1e-6
    with pytest.raises(ValueError):
        logcosh_loss(t64([1.0, 0.0]), [0.0])


@settings(max_examples=200, deadline=None)
@given(st.floats(-200, 200))
def test_logcosh_even_nonnegative_bounded(d):
    a = logcosh_loss(t64([d]), [0.0]).item()
    b = logcosh_loss(t64([-d]), [0.0]).item()
    assert a == b
    assert 0 <= a <= d * d / 2 + 1e-15
    if abs(d) < 5:
        assert abs(a - math.log(math.cosh(d))) < 1e-12


def test_logcosh_gradient_is_tanh():
    p = Parameter(np.array([-3.0, -0.5, 0.0, 0.7, 40.0]), dtype=np.float64)
    backward(logcosh_loss(p, np.zeros(5)))
    np.testing.assert_allclose(p.grad, np.tanh(p.data), atol=1e-15)


def test_cross_entropy_value():
    logits = t64([[0.0, np.log(3.0)]])
    assert abs(cross_entropy(logits, [1]).item() - (-np.log(0.75))) < 1e-12


# --- classification metrics ------------------------------------------------------------


def test_perfect_predictions():
    rep = confusion_and_prf([0, 1, 2, 1], [0, 1, 2, 1], 3)
    np.testing.assert_array_equal(rep.confusion, np.diag([1, 2, 1]))
    assert rep.accuracy == 1 and np.all(rep.precision == 1) and np.all(rep.f1 == 1)


def test_hand_counted_prf():
    rep = confusion_and_prf([0, 1, 1, 1], [0, 0, 1, 1], 2)
    assert abs(rep.precision[1] - 2 / 3) < 1e-12
    assert rep.recall[1] == 1
    assert abs(rep.f1[1] - 0.8) < 1e-12


def test_single_class_predictions_flag_zero_division():
    rep = confusion_and_prf([1, 1, 1], [0, 1, 2], 3)
    assert rep.recall.tolist() == [0, 1, 0]
    assert rep.zero_division["precision"] == [0, 2]
    assert not np.isnan(rep.f1).any()


def test_confusion_matrix_sums_to_n():
    rng = np.random.default_rng(0)
    p, t = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
    assert confusion_matrix(p, t, 4).sum() == 50
    with pytest.raises(ValueError):
        confusion_matrix([0, 5], [0, 1], 3)


def test_binary_prf_matches_hand_oracle_on_random_labels():
    rng = np.random.default_rng(42)
    for _ in range(100):
        t, p = rng.integers(0, 2, 20), rng.integers(0, 2, 20)
        rep = confusion_and_prf(p, t, 2)
        tp = int(((p == 1) & (t == 1)).sum())
        fp = int(((p == 1) & (t == 0)).sum())
        fn = int(((p == 0) & (t == 1)).sum())
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        assert rep.precision[1] == pytest.approx(prec, abs=1e-12)
        assert rep.recall[1] == pytest.approx(rec, abs=1e-12)
        assert rep.f1[1] == pytest.approx(f1, abs=1e-12)


# --- ROC ----------------------------------------------------------------------------


def test_auc_examples():
    assert roc_auc_binary([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert roc_auc_binary([0.5] * 4, [1, 0, 1, 0]) == 0.5
    assert roc_auc_binary([0.9, 0.4, 0.5, 0.1], [1, 1, 0, 0]) == 0.75
    assert roc_auc_binary([0.1, 0.2], [1, 1]) is None


def test_auc_matches_pair_counting():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(2, 51))
        scores = np.round(rng.random(n), 1)  # coarse values force ties
        positive = rng.random(n) < 0.5
        if positive.all() or not positive.any():
            continue
        assert roc_auc_binary(scores, positive) == pytest.approx(auc_pairs(scores, positive), abs=1e-12)


def test_auc_ovr_reports_absent_class():
    scores = np.array([[0.8, 0.2, 0.0], [0.3, 0.7, 0.0]])
    auc = roc_auc_ovr(scores, [0, 1])
    assert auc[:2] == [1.0, 1.0] and auc[2] is None


def test_roc_curve_endpoints():
    fpr, tpr = roc_curve([0.9, 0.4, 0.5, 0.1], [1, 1, 0, 0])
    assert (fpr[0], tpr[0]) == (0, 0) and (fpr[-1], tpr[-1]) == (1, 1)
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)


# --- regression and RALE ------------------------------------------------------------------


def test_r2_examples():
    assert r2_score([1, 2, 3], [1, 2, 3]) == 1.0
    assert r2_score([2, 2, 2], [1, 2, 3]) == 0.0
    assert r2_score([1, 2, 4], [1, 2, 3]) == 0.5
    with pytest.raises(ValueError):
        r2_score([1, 2], [3, 3])


def test_severity_to_rale_examples():
    assert severity_to_rale(0.0) == (1, "Mild")
    assert severity_to_rale(1.0) == (8, "Severe")
    assert severity_to_rale(0.5) == (4, "Moderate")
    with pytest.raises(ValueError):
        severity_to_rale(1.2)


def test_rale_round_trip_and_categories():
    for score in range(1, 9):
        assert severity_to_rale(rale_to_severity(score))[0] == score
        y = rale_to_severity(score)
        assert round(y * 7) + 1 == score
    assert [rale_category(s) for s in range(1, 9)] == ["Mild"] * 2 + ["Moderate"] * 3 + ["Severe"] * 3
    with pytest.raises(ValueError):
        rale_category(9)


# --- reports ------------------------------------------------------------------------


def test_report_json_is_deterministic_and_round_trips():
    scores = np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.3, 0.3, 0.4], [0.5, 0.4, 0.1]])
    rep = classification_report(scores, [0, 1, 2, 1])
    text = rep.to_json()
    assert text == classification_report(scores, [0, 1, 2, 1]).to_json()
    d = json.loads(text)
    assert list(d)[:4] == ["n", "num_classes", "class_names", "accuracy"]
    assert d["accuracy"] == 0.75
    again = EvalReport.from_dict(d)
    assert again.to_json() == text


def test_severity_report():
    rale = np.array([1, 3, 6, 8, 2])
    p = (rale - 1) / 7
    rep = severity_report(p, rale)
    assert rep.r2 == pytest.approx(1.0) and rep.mae == pytest.approx(0.0)
    assert rep.accuracy == 1.0
    assert rep.class_names == ["Mild", "Moderate", "Severe"]


def test_average_reports_is_unweighted():
    a = confusion_and_prf([0, 0, 0, 0], [0, 0, 0, 0], 2)
    b = confusion_and_prf([1, 0], [1, 1], 2)
    avg = average_reports([a, b])
    assert avg.recall[0] == pytest.approx((1 + 0) / 2)
    assert avg.recall[1] == pytest.approx((0 + 0.5) / 2)
    assert avg.confusion.sum() == 6


def test_average_accuracy_is_fold_mean_and_round_trips():
    a = confusion_and_prf([0, 0, 0, 0], [0, 0, 0, 0], 2)   # accuracy 1
    b = confusion_and_prf([1, 0], [1, 1], 2)               # accuracy 0.5
    avg = average_reports([a, b])
    assert avg.accuracy == pytest.approx(0.75)
    assert EvalReport.from_dict(avg.to_dict()).accuracy == pytest.approx(0.75)
    assert "averaged" not in a.to_dict()
