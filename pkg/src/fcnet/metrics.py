"""Classification metrics, ROC/DET curves and Welch's t-test."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fn: int
    tn: int
    fp: int

    @property
    def n_pos(self) -> int:
        return self.tp + self.fn

    @property
    def n_neg(self) -> int:
        return self.tn + self.fp

    @classmethod
    def from_predictions(cls, labels, predictions) -> ConfusionMatrix:
        labels = np.asarray(labels).reshape(-1)
        predictions = np.asarray(predictions).reshape(-1)
        if labels.shape != predictions.shape:
            raise InputError("labels and predictions differ in length")
        pos = labels == 1
        hit = predictions == 1
        return cls(int(np.sum(pos & hit)), int(np.sum(pos & ~hit)),
                   int(np.sum(~pos & ~hit)), int(np.sum(~pos & hit)))


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    sensitivity: float
    specificity: float


def _ratio(num: int, den: int) -> float:
    return num / den if den else math.nan


def metrics(cm: ConfusionMatrix) -> Metrics:
    """Accuracy, sensitivity and specificity; ``nan`` where undefined."""
    return Metrics(
        _ratio(cm.tp + cm.tn, cm.n_pos + cm.n_neg),
        _ratio(cm.tp, cm.n_pos),
        _ratio(cm.tn, cm.n_neg),
    )


def _check_scores(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise InputError("scores and labels differ in length")
    pos = labels == 1
    if not pos.any() or pos.all():
        raise InputError("ROC needs both classes")
    return scores, pos


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC points from sweeping a threshold down through the unique scores.

    Returns ``(fpr, tpr, thresholds)``; the first point is (0, 0) at an
    infinite threshold and the last is (1, 1).
    """
    scores, pos = _check_scores(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    p = pos[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(p)[last_of_run]
    fps = (last_of_run + 1) - tps
    tpr = np.r_[0.0, tps / pos.sum()]
    fpr = np.r_[0.0, fps / (~pos).sum()]
    return fpr, tpr, np.r_[np.inf, s[last_of_run]]


def trapezoid_auc(fpr: np.ndarray, tpr: np.ndarray) -> float:
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def roc_and_auc(scores, labels) -> tuple[np.ndarray, np.ndarray, float]:
    fpr, tpr, _ = roc_curve(scores, labels)
    return fpr, tpr, trapezoid_auc(fpr, tpr)


def det_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """``(fpr, fnr)`` with ``fnr = 1 - tpr`` at every ROC point."""
    fpr, tpr, _ = roc_curve(scores, labels)
    return fpr, 1.0 - tpr


# -- Welch t-test ---------------------------------------------------------

_FPMIN = 1e-300


def _betacf(a: float, b: float, x: float, max_iter: int = 500, tol: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _FPMIN if abs(d) < _FPMIN else d
        c = 1.0 + aa / c
        c = _FPMIN if abs(c) < _FPMIN else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _FPMIN if abs(d) < _FPMIN else d
        c = 1.0 + aa / c
        c = _FPMIN if abs(c) < _FPMIN else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if a <= 0 or b <= 0:
        raise InputError("beta parameters must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # The fraction converges quickly only on one side of the mean.
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: float
    p_value: float


def welch_ttest(a, b) -> TTestResult:
    """Two-sample t-test without assuming equal variances.

    Two constant samples give ``p = 1`` when their means agree and ``p = 0``
    otherwise.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size < 2 or b.size < 2:
        raise InputError("each sample needs at least two values")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    if va + vb == 0.0:
        df = float(a.size + b.size - 2)
        if diff == 0.0:
            return TTestResult(0.0, df, 1.0)
        return TTestResult(math.copysign(math.inf, diff), df, 0.0)
    t = diff / math.sqrt(va + vb)
    # Welch-Satterthwaite in terms of variance shares, safe against underflow.
    ra, rb = va / (va + vb), vb / (va + vb)
    df = 1.0 / (ra * ra / (a.size - 1) + rb * rb / (b.size - 1))
    return TTestResult(float(t), float(df), min(1.0, student_t_two_sided_p(t, df)))
