"""AUC and log loss."""
from __future__ import annotations

import numpy as np

from .autograd import PROB_EPS
from .errors import MetricError


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; a positive tied with a negative counts one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # average ranks over ties, 1-based
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_s)) + 1]
    ends = np.r_[starts[1:], len(s)]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(len(s))
    ranks[order] = np.repeat(avg, ends - starts)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_pairwise(scores, labels) -> float:
    """O(n^2) reference AUC over every positive/negative pair."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    pos, neg = s[y], s[~y]
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("AUC needs at least one positive and one negative")
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def logloss(scores, labels) -> float:
    p = np.clip(np.asarray(scores, dtype=np.float64).ravel(), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if len(p) == 0:
        raise MetricError("log loss of an empty set")
    if p.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())
