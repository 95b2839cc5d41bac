"""Ranking metrics: AUC by rank-sum with midranks, and its per-user aggregate.

The grouped variant computes AUC independently per user and averages with
weights proportional to each included user's sample count. Users whose labels
are single-class carry no ranking information; they are dropped from both the
numerator and the weight denominator, which is the usual convention and part
of this metric's contract.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import MetricError, NumericsError, ShapeError

__all__ = ["auc", "gauc"]


def _check_pair(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or y.shape != s.shape:
        raise ShapeError(f"scores {s.shape} and labels {y.shape} must be matching 1-D arrays")
    if not np.isfinite(s).all():
        raise NumericsError("scores must be finite")
    if not np.isin(y, (0, 1)).all():
        raise NumericsError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability that a random positive outscores a random negative,
    counting ties as one half. Equivalent to the rank-sum statistic."""
    s, y = _check_pair(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError(
            f"AUC undefined: need both classes, got {n_pos} positives and {n_neg} negatives"
        )
    ranks = rankdata(s, method="average")
    pos_rank_sum = ranks[y == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def gauc(scores: np.ndarray, labels: np.ndarray, user_ids) -> float:
    """Sample-count-weighted mean of per-user AUCs over users with both classes."""
    s, y = _check_pair(scores, labels)
    users = np.asarray(user_ids)
    if users.shape != s.shape:
        raise ShapeError(f"user ids shape {users.shape} does not match scores {s.shape}")
    total_weight = 0
    weighted = 0.0
    for user in np.unique(users):
        mask = users == user
        y_u = y[mask]
        if y_u.min() == y_u.max():
            continue  # single-class user: no ranking information
        weighted += mask.sum() * auc(s[mask], y_u)
        total_weight += int(mask.sum())
    if total_weight == 0:
        raise MetricError("GAUC undefined: no user has both a positive and a negative")
    return weighted / total_weight
