import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from fcnet.errors import InputError
from fcnet.metrics import (ConfusionMatrix, det_curve, metrics, regularized_incomplete_beta,
                           roc_and_auc, roc_curve, welch_ttest)
from oracles import auc_pairs

WELCH_P_T1_DF8 = 0.34659350708733413412


def test_confusion_from_predictions():
    cm = ConfusionMatrix.from_predictions([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
    assert (cm.tp, cm.fn, cm.tn, cm.fp) == (2, 1, 1, 1)
    with pytest.raises(InputError):
        ConfusionMatrix.from_predictions([1, 0], [1])


def test_metrics_examples():
    m = metrics(ConfusionMatrix(tp=8, fn=2, tn=9, fp=1))
    assert (m.accuracy, m.sensitivity, m.specificity) == (0.85, 0.8, 0.9)


def test_metrics_undefined_is_nan():
    m = metrics(ConfusionMatrix(tp=3, fn=0, tn=0, fp=0))
    assert m.sensitivity == 1.0 and math.isnan(m.specificity)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_accuracy_is_class_weighted_mean(tp, fn, tn, fp):
    n_pos, n_neg = tp + fn, tn + fp
    if n_pos == 0 or n_neg == 0:
        return
    acc = Fraction(tp + tn, n_pos + n_neg)
    sen, spe = Fraction(tp, n_pos), Fraction(tn, n_neg)
    assert acc * (n_pos + n_neg) == sen * n_pos + spe * n_neg
    m = metrics(ConfusionMatrix(tp, fn, tn, fp))
    assert m.accuracy == pytest.approx(float(acc))


def test_sen_minus_spe_increases_with_tp_at_fixed_correct_count():
    n_asd, n_hc = 20, 25
    for correct in range(n_asd + n_hc + 1):
        gaps = []
        for tp in range(max(0, correct - n_hc), min(n_asd, correct) + 1):
            tn = correct - tp
            gaps.append(Fraction(tp, n_asd) - Fraction(tn, n_hc))
        assert all(b > a for a, b in zip(gaps, gaps[1:]))


# -- ROC / AUC ---------------------------------------------------------------


def test_auc_extremes():
    labels = np.array([1, 1, 0, 0])
    assert roc_and_auc([0.9, 0.8, 0.2, 0.1], labels)[2] == 1.0
    assert roc_and_auc([0.5] * 4, labels)[2] == 0.5
    assert roc_and_auc([0.1, 0.2, 0.8, 0.9], labels)[2] == 0.0


@pytest.mark.parametrize("seed", range(100))
def test_auc_matches_pair_statistic(seed):
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.r_[np.ones(25, int), np.zeros(25, int)])
    scores = rng.integers(0, 20, 50) / 20.0  # heavy ties
    assert roc_and_auc(scores, labels)[2] == pytest.approx(auc_pairs(scores, labels), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=40), st.integers(0, 2**32 - 1))
def test_roc_monotone_and_bounded(scores, seed):
    labels = np.random.default_rng(seed).integers(0, 2, len(scores))
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    fpr, tpr, auc = roc_and_auc(scores, labels)
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
    assert (fpr[0], tpr[0], fpr[-1], tpr[-1]) == (0, 0, 1, 1)
    assert 0.0 <= auc <= 1.0


def test_reversed_scores_complement_auc():
    rng = np.random.default_rng(3)
    scores = rng.random(60)
    labels = rng.integers(0, 2, 60)
    assert roc_and_auc(-scores, labels)[2] == pytest.approx(1 - roc_and_auc(scores, labels)[2])


def test_roc_thresholds_and_det():
    fpr, tpr, thr = roc_curve([0.9, 0.4, 0.4, 0.1], [1, 0, 1, 0])
    assert thr[0] == math.inf and thr[1:].tolist() == [0.9, 0.4, 0.1]
    dfpr, fnr = det_curve([0.9, 0.4, 0.4, 0.1], [1, 0, 1, 0])
    assert np.array_equal(dfpr, fpr) and np.allclose(fnr, 1 - tpr)


def test_roc_needs_both_classes():
    with pytest.raises(InputError):
        roc_curve([0.1, 0.2], [1, 1])


# -- Welch t-test -------------------------------------------------------------


def test_welch_reference_example():
    r = welch_ttest([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])
    assert r.t == pytest.approx(-1.0, abs=1e-12)
    assert r.df == pytest.approx(8.0, abs=1e-12)
    assert r.p_value == pytest.approx(WELCH_P_T1_DF8, abs=1e-12)


def test_welch_identical_samples():
    assert welch_ttest([1, 2, 3], [1, 2, 3]).p_value == 1.0
    assert welch_ttest([2, 2, 2], [2, 2, 2]).p_value == 1.0
    assert welch_ttest([2, 2, 2], [3, 3, 3]).p_value == 0.0


def test_welch_needs_two_values():
    with pytest.raises(InputError):
        welch_ttest([1.0], [1.0, 2.0])


@pytest.mark.parametrize("seed", range(20))
def test_welch_matches_reference_implementation(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 1, rng.integers(2, 30))
    b = rng.normal(0.5, 2, rng.integers(2, 30))
    ours = welch_ttest(a, b)
    ref = sps.ttest_ind(a, b, equal_var=False)
    assert ours.t == pytest.approx(ref.statistic, rel=1e-10)
    assert ours.p_value == pytest.approx(ref.pvalue, rel=1e-8, abs=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=20),
       st.lists(st.floats(-100, 100), min_size=2, max_size=20))
def test_welch_p_in_unit_interval_and_symmetric(a, b):
    ab, ba = welch_ttest(a, b), welch_ttest(b, a)
    assert 0.0 <= ab.p_value <= 1.0
    assert ab.p_value == pytest.approx(ba.p_value, abs=1e-12)


@pytest.mark.parametrize("a,b,x", [(0.5, 0.5, 0.3), (4.0, 0.5, 0.9), (30.0, 0.5, 0.99),
                                   (2.0, 3.0, 0.0), (2.0, 3.0, 1.0)])
def test_incomplete_beta_matches_reference(a, b, x):
    assert regularized_incomplete_beta(a, b, x) == pytest.approx(sps.beta.cdf(x, a, b), rel=1e-12,
                                                                 abs=1e-15)
