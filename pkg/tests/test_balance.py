import numpy as np
import pytest

from taskmoe.balance import compute_load_stats, lb_loss_gradient, skew_diagnostics
from taskmoe.errors import StateError
from taskmoe.routing import BatchRouting, RoutingBudget, naive_route_batch, route_batch


def make_routing(active, weights, shared_size=0):
    """Hand-built batch routing from explicit active sets and weights."""
    active = np.asarray(active, dtype=np.intp)   # (T, B, K)
    weights = np.asarray(weights, dtype=np.float64)  # (T, B, E)
    t_n, b_n, _ = active.shape
    unions = tuple(np.unique(active[:, b, :]) for b in range(b_n))
    return BatchRouting(
        shared=np.zeros((b_n, shared_size), dtype=np.intp),
        adaptive=active,
        active=active,
        unions=unions,
        weights=weights,
        full_probs=weights,
    )


def enumerate_lb_value(active, weights, num_experts):
    """Oracle: accumulate frequency and mass pair by pair, then combine."""
    t_n, b_n, k = np.asarray(active).shape
    freq = np.zeros(num_experts)
    mass = np.zeros(num_experts)
    for t in range(t_n):
        for b in range(b_n):
            for e in active[t][b]:
                freq[e] += 1.0
            for e in range(num_experts):
                mass[e] += weights[t][b][e]
    freq /= b_n * t_n
    mass /= b_n * t_n
    return (num_experts / k) * sum(freq[e] * mass[e] for e in range(num_experts))


class TestLoadStats:
    def test_uniform_utilization_is_exactly_one(self):
        # E=4, K=2, T=1, B=2: instance 0 selects {0,1}, instance 1 selects {2,3}
        active = [[[0, 1], [2, 3]]]
        weights = [[[0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5]]]
        stats = compute_load_stats(make_routing(active, weights))
        assert stats.value == 1.0
        assert np.allclose(stats.frequency, [0.5] * 4)
        assert np.allclose(stats.mass, [0.25] * 4)

    def test_collapse_equals_expert_count(self):
        # K=1, every router on expert 0
        active = [[[0], [0], [0]], [[0], [0], [0]]]
        weights = np.zeros((2, 3, 5))
        weights[:, :, 0] = 1.0
        stats = compute_load_stats(make_routing(active, weights))
        assert stats.value == 5.0
        assert stats.frequency[0] == 1.0
        assert stats.mass[0] == 1.0

    def test_hand_case_one_point_five_five(self):
        # B=1, T=2, E=4, K=2 with explicit weights
        active = [[[0, 1]], [[1, 2]]]
        weights = [[[0.6, 0.4, 0, 0]], [[0, 0.7, 0.3, 0]]]
        stats = compute_load_stats(make_routing(active, weights))
        assert np.allclose(stats.frequency, [0.5, 1.0, 0.5, 0.0])
        assert np.allclose(stats.mass, [0.3, 0.55, 0.15, 0.0])
        assert abs(stats.value - 1.55) < 1e-12
        assert abs(stats.value - enumerate_lb_value(active, weights, 4)) < 1e-12

    def test_sums_and_counts(self):
        rng = np.random.default_rng(0)
        for seed in range(20):
            z = np.random.default_rng(seed).normal(size=(3, 8, 10))
            routing = route_batch(z, RoutingBudget(1, 2))
            stats = compute_load_stats(routing)
            assert abs(stats.frequency.sum() - 3.0) < 1e-10  # sums to K
            assert abs(stats.mass.sum() - 1.0) < 1e-10
            assert (stats.counts == 8 * 3 * stats.frequency).all()
            assert (stats.frequency >= 0).all() and (stats.frequency <= 1).all()

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(2, 6, 7))
        routing = route_batch(z, RoutingBudget(1, 1))
        base = compute_load_stats(routing).value
        perm = rng.permutation(7)
        permuted = route_batch(z[:, :, perm], RoutingBudget(1, 1))
        assert abs(compute_load_stats(permuted).value - base) < 1e-12

    def test_empty_batch_rejected(self):
        routing = make_routing(np.zeros((2, 0, 1), dtype=int), np.zeros((2, 0, 4)))
        with pytest.raises(StateError):
            compute_load_stats(routing)


class TestLbGradient:
    def test_zero_strength_path_is_exactly_zero(self):
        # the regularizer enters the objective scaled by its strength; at zero
        # strength the contribution is identically zero (training multiplies by it)
        z = np.random.default_rng(2).normal(size=(2, 4, 6))
        routing = route_batch(z, RoutingBudget(1, 1))
        stats = compute_load_stats(routing)
        grad = 0.0 * lb_loss_gradient(stats, routing)
        assert (grad == 0.0).all()

    def test_symmetric_pair_opposite_signs(self):
        # router 1 selects {0,1} with equal weights; frequencies differ through
        # a second router, so the pair's gradient components are +/- mirrored
        active = [[[0, 1]], [[0, 2]]]
        weights = [[[0.5, 0.5, 0, 0]], [[0.5, 0, 0.5, 0]]]
        routing = make_routing(active, weights)
        stats = compute_load_stats(routing)
        grad = lb_loss_gradient(stats, routing)
        assert abs(grad[0, 0, 0] + grad[0, 0, 1]) < 1e-15
        assert grad[0, 0, 0] > 0 > grad[0, 0, 1]

    def test_zero_on_unselected_entries(self):
        z = np.random.default_rng(3).normal(size=(3, 5, 8))
        routing = route_batch(z, RoutingBudget(1, 1))
        stats = compute_load_stats(routing)
        grad = lb_loss_gradient(stats, routing)
        for t in range(3):
            for b in range(5):
                off = np.setdiff1d(np.arange(8), routing.active[t, b])
                assert (grad[t, b, off] == 0.0).all()

    @pytest.mark.parametrize("dense_probs", [False, True])
    def test_matches_finite_differences_with_frozen_selections(self, dense_probs):
        from taskmoe.routing import _renormalized_weights_batch
        from taskmoe.linalg import softmax

        rng = np.random.default_rng(4)
        z = rng.normal(size=(2, 3, 6))
        budget = RoutingBudget(1, 1)
        routing = route_batch(z, budget)

        def value_at(logits):
            reweighted = BatchRouting(
                shared=routing.shared,
                adaptive=routing.adaptive,
                active=routing.active,
                unions=routing.unions,
                weights=_renormalized_weights_batch(logits, routing.active),
                full_probs=softmax(logits, axis=2),
            )
            return compute_load_stats(reweighted, dense_probs).value

        stats = compute_load_stats(routing, dense_probs)
        grad = lb_loss_gradient(stats, routing)
        numeric = np.zeros_like(grad)
        step = 1e-6
        for t in range(2):
            for b in range(3):
                for e in range(6):
                    bumped = z.copy()
                    bumped[t, b, e] += step
                    dipped = z.copy()
                    dipped[t, b, e] -= step
                    numeric[t, b, e] = (value_at(bumped) - value_at(dipped)) / (2 * step)
        assert np.linalg.norm(grad - numeric) / np.linalg.norm(numeric) < 1e-5

    def test_mismatched_stats_rejected(self):
        z = np.random.default_rng(5).normal(size=(2, 3, 6))
        routing = route_batch(z, RoutingBudget(1, 1))
        stats = compute_load_stats(routing)
        other = route_batch(z[:, :2, :], RoutingBudget(1, 1))
        with pytest.raises(StateError):
            lb_loss_gradient(stats, other)


class TestSkewDiagnostics:
    def test_uniform_loads_zero_cv(self):
        active = [[[0, 1], [2, 3]]]
        weights = [[[0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5]]]
        diag = skew_diagnostics(compute_load_stats(make_routing(active, weights)))
        assert diag.cv == 0.0
        assert diag.dead_fraction == 0.0

    def test_full_collapse_dead_fraction(self):
        active = [[[0]], [[0]]]
        weights = np.zeros((2, 1, 8))
        weights[:, :, 0] = 1.0
        diag = skew_diagnostics(compute_load_stats(make_routing(active, weights)))
        assert diag.dead_fraction == (8 - 1) / 8
        assert diag.max_mean_ratio == 8.0

    def test_accumulated_traffic_skew_grows_with_tasks(self):
        # models the traffic feedback loop: each additional router prefers
        # already-loaded experts, so aggregate concentration grows with the
        # task count, while a single router stays near its sampling noise
        def accumulated_cv(tasks, seed, experts=16, batch=64, k=2, gain=1.5):
            rng = np.random.default_rng((seed, tasks))
            counts = np.zeros(experts)
            for _ in range(tasks):
                bias = gain * np.log1p(counts)
                z = bias[None, None, :] + rng.normal(size=(1, batch, experts))
                routing = naive_route_batch(z, k)
                counts += np.bincount(routing.active.ravel(), minlength=experts)
            return counts.std() / counts.mean()

        cv_single = np.mean([accumulated_cv(1, s) for s in range(100)])
        cv_many = np.mean([accumulated_cv(8, s) for s in range(100)])
        assert cv_many >= cv_single
