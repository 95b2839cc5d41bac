import numpy as np
import pytest

from taskmoe.errors import MetricError, NumericsError, ShapeError
from taskmoe.metrics import auc, gauc


def pairwise_auc(scores, labels):
    """O(n^2) oracle: count positive-negative pairs, ties worth one half."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, int)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


class TestAuc:
    def test_perfect_ranking(self):
        assert auc([0.9, 0.1], [1, 0]) == 1.0

    def test_all_ties(self):
        assert auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5

    def test_matches_pairwise_oracle_with_ties(self):
        rng = np.random.default_rng(0)
        for seed in range(30):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(5, 50))
            scores = rng.choice([0.1, 0.3, 0.5, 0.7, 0.9], size=n)  # forced ties
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                continue
            assert auc(scores, labels) == pytest.approx(pairwise_auc(scores, labels), abs=1e-14)

    def test_single_class_rejected(self):
        with pytest.raises(MetricError):
            auc([0.2, 0.4], [1, 1])

    def test_bad_labels_rejected(self):
        with pytest.raises(NumericsError):
            auc([0.2, 0.4], [1, 2])

    def test_rank_invariance_under_monotone_transform(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=40)
        labels = rng.integers(0, 2, size=40)
        base = auc(scores, labels)
        for transform in (np.exp, np.tanh, lambda s: 3 * s + 7, lambda s: s**3):
            assert auc(transform(scores), labels) == pytest.approx(base, abs=1e-14)


class TestGauc:
    def test_single_user_reduces_to_auc(self):
        rng = np.random.default_rng(2)
        scores = rng.normal(size=20)
        labels = rng.integers(0, 2, size=20)
        users = ["only"] * 20
        assert gauc(scores, labels, users) == pytest.approx(auc(scores, labels), abs=1e-14)

    def test_hand_weighted_case(self):
        # user a: perfect ranking over 2 samples; user b: tied over 2 samples
        scores = [0.9, 0.1, 0.5, 0.5]
        labels = [1, 0, 1, 0]
        users = ["a", "a", "b", "b"]
        assert pairwise_auc(scores[:2], labels[:2]) == 1.0
        assert pairwise_auc(scores[2:], labels[2:]) == 0.5
        assert gauc(scores, labels, users) == pytest.approx(0.75, abs=1e-14)

    def test_single_class_users_excluded_from_weights(self):
        scores = [0.9, 0.1, 0.3, 0.4, 0.2]
        labels = [1, 0, 1, 1, 1]  # user b has positives only
        users = ["a", "a", "b", "b", "b"]
        assert gauc(scores, labels, users) == 1.0

    def test_no_qualified_user_rejected(self):
        with pytest.raises(MetricError):
            gauc([0.1, 0.2, 0.3], [1, 1, 0], ["a", "a", "b"])

    def test_null_scores_near_half(self):
        values = []
        for seed in range(200):
            rng = np.random.default_rng(seed)
            users = np.repeat([f"u{i}" for i in range(30)], 8)
            labels = rng.integers(0, 2, size=240)
            scores = rng.normal(size=240)
            values.append(gauc(scores, labels, users))
        assert abs(np.mean(values) - 0.5) < 0.02

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            gauc([0.1, 0.2], [1, 0], ["a"])
