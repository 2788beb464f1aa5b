"""Ranking and thresholded multi-label metrics.

Conventions used throughout:

* AU(PRC) pools every (instance, class) pair into one precision-recall curve
  and sums ``(R_n - R_{n-1}) * P_n`` over the distinct score thresholds,
  where a pair is predicted positive at threshold ``t`` when ``score >= t``.
* The rank of a label is the number of labels scoring at least as high
  (ties count against the prediction).
* Coverage is ``(rank of the worst-ranked true label - 1) / L``.
* Ranking-based metrics skip instances without positive labels; the count
  of skipped instances is reported.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

DIRECTIONS = {
    "au_prc": "up",
    "average_precision": "up",
    "coverage_error": "down",
    "hamming_loss": "down",
    "multilabel_accuracy": "up",
    "one_error": "down",
    "ranking_loss": "down",
}


class UndefinedMetricError(ValueError):
    pass


@dataclass
class MetricReport:
    au_prc: float
    average_precision: float
    coverage_error: float
    hamming_loss: float
    multilabel_accuracy: float
    one_error: float
    ranking_loss: float
    excluded_instances: int = 0

    def as_dict(self) -> dict:
        d = asdict(self)
        d["directions"] = dict(DIRECTIONS)
        return d


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    y = np.atleast_2d(np.asarray(labels))
    if s.shape != y.shape or s.size == 0:
        raise ValueError(f"scores {s.shape} and labels {y.shape} must be equal, non-empty shapes")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary")
    return s, y.astype(bool)


def au_prc(scores, labels) -> float:
    """Area under the pooled precision-recall curve."""
    s, y = _check(scores, labels)
    s, y = s.ravel(), y.ravel()
    total = int(y.sum())
    if total == 0:
        raise UndefinedMetricError("AU(PRC) is undefined without positive labels")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # Last position of each run of equal scores = one threshold.
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = tp[last].astype(np.float64)
    precision = tp / (last + 1)
    recall = tp / total
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _ranks(s: np.ndarray) -> np.ndarray:
    """rank[i, j] = number of labels of row i scoring >= s[i, j]."""
    return (s[:, None, :] >= s[:, :, None]).sum(axis=2)


def mc_metrics(scores, labels, threshold: float = 0.5) -> MetricReport:
    s, y = _check(scores, labels)
    n, L = s.shape
    pred = s > threshold
    hamming = float((pred != y).mean())
    inter = (pred & y).sum(axis=1)
    union = (pred | y).sum(axis=1)
    accuracy = float(np.where(union == 0, 1.0, inter / np.maximum(union, 1)).mean())

    keep = y.any(axis=1)
    excluded = int(n - keep.sum())
    try:
        aup = au_prc(s, y)
    except UndefinedMetricError:
        aup = float("nan")
    if not keep.any():
        nan = float("nan")
        return MetricReport(aup, nan, nan, hamming, accuracy, nan, nan, excluded)
    s, y = s[keep], y[keep]
    ranks = _ranks(s)
    npos = y.sum(axis=1)

    one_error = float((~y[np.arange(len(s)), s.argmax(axis=1)]).mean())

    worst = np.where(y, s, np.inf).min(axis=1)
    coverage = float((((s >= worst[:, None]).sum(axis=1) - 1) / L).mean())

    nneg = L - npos
    bad = (y[:, :, None] & ~y[:, None, :]) & (s[:, None, :] >= s[:, :, None])
    pairs = bad.sum(axis=(1, 2))
    ranking = float(np.where(nneg == 0, 0.0, pairs / np.maximum(npos * nneg, 1)).mean())

    # Among labels ranked at or above a true label, how many are true.
    above_true = ((s[:, None, :] >= s[:, :, None]) & y[:, None, :]).sum(axis=2)
    prec = np.where(y, above_true / ranks, 0.0).sum(axis=1) / npos
    avg_prec = float(prec.mean())
    return MetricReport(aup, avg_prec, coverage, hamming, accuracy, one_error, ranking, excluded)
