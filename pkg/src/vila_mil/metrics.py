"""Classification metrics and the paired t-test, implemented from scratch."""

from __future__ import annotations

import logging
import math
from typing import NamedTuple

import numpy as np

from .data import ProtocolError

log = logging.getLogger(__name__)


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    n = len(x)
    while i < n:
        j = i
        while j + 1 < n and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def binary_auc(scores, positive) -> float:
    """Mann-Whitney AUC; ties between a positive and a negative count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ProtocolError("AUC needs at least one positive and one negative sample")
    r = average_ranks(scores)[positive].sum()
    u = r - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_macro(scores, labels, average: str = "macro") -> float:
    """One-vs-rest AUC averaged over classes.

    ``scores`` is (n, C); a 1-D array is taken as the positive-class score of
    a binary problem. Classes lacking positives or negatives are skipped with
    a warning; if every class is skipped a :class:`ProtocolError` is raised.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim == 1:
        return binary_auc(scores, labels == 1)
    n, C = scores.shape
    if len(labels) != n:
        raise ValueError(f"{n} score rows but {len(labels)} labels")
    if average == "micro":
        onehot = labels[:, None] == np.arange(C)[None, :]
        return binary_auc(scores.reshape(-1), onehot.reshape(-1))
    if average != "macro":
        raise ValueError(f"average must be 'macro' or 'micro', got {average!r}")
    values, skipped = [], []
    for c in range(C):
        pos = labels == c
        if pos.all() or not pos.any():
            skipped.append(c)
            continue
        values.append(binary_auc(scores[:, c], pos))
    if skipped:
        if not values:
            raise ProtocolError(f"no class has both positives and negatives (classes {skipped})")
        log.warning("AUC skipped classes without positives or negatives: %s", skipped)
    return float(np.mean(values))


def confusion_matrix(predictions, labels, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
    return cm


def f1_macro(predictions, labels, n_classes: int | None = None, average: str = "macro") -> float:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(predictions) != len(labels):
        raise ValueError(f"length mismatch: {len(predictions)} predictions, {len(labels)} labels")
    if len(labels) == 0:
        raise ValueError("f1 of an empty sample")
    if average == "micro":
        return accuracy(predictions, labels)
    if n_classes is None:
        n_classes = int(max(predictions.max(), labels.max())) + 1
    cm = confusion_matrix(predictions, labels, n_classes)
    scores, absent = [], []
    for c in range(n_classes):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        if tp + fp + fn == 0:
            absent.append(c)
            continue
        # 2PR / (P + R) rewritten with one rounding; 0 when tp = 0
        scores.append(2 * tp / (2 * tp + fp + fn))
    if absent:
        log.warning("F1 skipped classes absent from predictions and labels: %s", absent)
    return float(np.mean(scores))


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(predictions) != len(labels):
        raise ValueError(f"length mismatch: {len(predictions)} predictions, {len(labels)} labels")
    if len(labels) == 0:
        raise ValueError("accuracy of an empty sample")
    return float(np.mean(predictions == labels))


# ------------------------------------------------------------- t-test

def _betacf(a: float, b: float, x: float, max_iter: int = 300, tol: float = 1e-15) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


class TTestResult(NamedTuple):
    pvalue: float
    statistic: float
    df: int
    degenerate: bool


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired t-test on per-run metric pairs.

    Zero-variance differences: all-zero gives p = 1; a constant nonzero
    difference is flagged ``degenerate`` with p = 0 (the limit, i.e. < 1e-12).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples need equal 1-D shapes, got {a.shape} and {b.shape}")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    diff = a - b
    df = n - 1
    sd = diff.std(ddof=1)
    mean = diff.mean()
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(1.0, 0.0, df, False)
        return TTestResult(0.0, math.copysign(math.inf, mean), df, True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(student_t_two_sided(t, df), float(t), df, False)
