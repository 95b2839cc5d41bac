import math

import numpy as np
import pytest

from taskmoe.data import InteractionLog, SynthSpec, generate
from taskmoe.errors import ConfigError, NumericsError, StateError, TrainingDiverged
from taskmoe.model import forward_dense, forward_sparse, init_model
from taskmoe.routing import RoutingBudget
from taskmoe.training import (
    AdamOptimizer,
    TrainConfig,
    backward,
    build_model,
    grad_check,
    make_optimizer,
    task_loss,
    total_loss,
    train,
)


def tiny_model(seed=0, lb_strength=0.05, **overrides):
    params = dict(num_features=4, d_hidden=5, d_in=4, d_out=3, num_experts=4,
                  num_tasks=2, budget=RoutingBudget(1, 1),
                  expert_nonlinearity="relu")
    params.update(overrides)
    return init_model(np.random.default_rng(seed), lb_strength=lb_strength, **params)


def random_batch(model, batch=3, seed=100):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, model.num_features))
    y = rng.integers(0, 2, size=(model.num_tasks, batch)).astype(float)
    return x, y


def separable_log(n=300, d=4, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    w = rng.standard_normal(d)
    y = (x @ w > 0).astype(np.int64)[:, None]
    users = [f"u{i % 20}" for i in range(n)]
    return InteractionLog(user_ids=users, features=x, labels=y, task_names=["y_0"])


class TestTaskLoss:
    def test_perfect_prediction_near_zero(self):
        y = np.array([[1.0, 0.0, 1.0]])
        assert task_loss(y, y) <= 1e-6 * y.shape[1]

    def test_uninformative_predictor(self):
        t_n, b_n = 3, 5
        preds = np.full((t_n, b_n), 0.5)
        labels = np.zeros((t_n, b_n))
        assert abs(task_loss(preds, labels) - t_n * math.log(2)) < 1e-12

    def test_zero_weights_zero_loss(self):
        preds = np.array([[0.9, 0.2], [0.4, 0.7]])
        labels = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert task_loss(preds, labels, weights=[0.0, 0.0]) == 0.0

    def test_out_of_range_prediction_rejected(self):
        with pytest.raises(NumericsError):
            task_loss(np.array([[1.2]]), np.array([[1.0]]))

    def test_boundary_predictions_clamped_not_rejected(self):
        value = task_loss(np.array([[0.0, 1.0]]), np.array([[0.0, 1.0]]))
        assert value < 1e-6


class TestTotalLoss:
    def test_disabled_regularizer(self):
        assert total_loss(2.0, 123.0, 0.0) == 2.0

    def test_arithmetic(self):
        assert abs(total_loss(2.0, 1.5, 0.1) - 2.15) < 1e-15

    def test_linearity_in_strength(self):
        base = total_loss(1.0, 2.0, 0.05) - 1.0
        doubled = total_loss(1.0, 2.0, 0.1) - 1.0
        assert abs(doubled - 2 * base) < 1e-15

    def test_negative_strength_rejected(self):
        with pytest.raises(NumericsError):
            total_loss(1.0, 1.0, -0.1)


class TestBackward:
    def test_zero_objective_zero_gradients(self):
        model = tiny_model(lb_strength=0.0)
        model.task_loss_weights = np.zeros(model.num_tasks)
        x, y = random_batch(model)
        result = forward_sparse(x, model)
        back = backward(result, model, y)
        assert back.total == 0.0
        for name, grad in back.gradients.items():
            assert (grad == 0.0).all(), name

    @pytest.mark.parametrize("mode", ["sparse", "dense"])
    def test_finite_difference_oracle(self, mode):
        model = tiny_model(seed=1, lb_strength=0.05)
        x, y = random_batch(model, seed=2)
        report = grad_check(model, x, y, mode=mode)
        assert report.passed, report.block_errors

    def test_unselected_expert_gradient_exactly_zero(self):
        model = tiny_model(seed=2, num_experts=8, budget=RoutingBudget(1, 1))
        x, y = random_batch(model, batch=2, seed=3)
        result = forward_sparse(x, model)
        selected = set()
        for u in result.routing.unions:
            selected |= set(u.tolist())
        unselected = set(range(8)) - selected
        assert unselected, "construction should leave some experts unselected"
        back = backward(result, model, y)
        for e in unselected:
            assert (back.gradients[f"expert_{e}.weight"] == 0.0).all()
            assert (back.gradients[f"expert_{e}.bias"] == 0.0).all()

    def test_missing_cache_rejected(self):
        model = tiny_model(seed=3)
        x, y = random_batch(model, seed=4)
        result = forward_sparse(x, model, keep_cache=False)
        with pytest.raises(StateError, match="keep_cache"):
            backward(result, model, y)


class TestGradCheck:
    def test_parameter_budget_enforced(self):
        model = tiny_model(seed=4, num_features=40, d_hidden=64, d_in=48, d_out=32,
                           num_experts=8)
        x, y = random_batch(model, seed=5)
        with pytest.raises(ConfigError):
            grad_check(model, x, y)

    def test_ten_seeds_all_blocks(self):
        for seed in range(10):
            model = tiny_model(seed=seed, lb_strength=0.05)
            x, y = random_batch(model, seed=200 + seed)
            report = grad_check(model, x, y)
            assert report.max_rel_error < 1e-4, (seed, report.block_errors)

    def test_zero_perturbation_consistency(self):
        from taskmoe.balance import compute_load_stats
        from taskmoe.training import _weighted_bce

        model = tiny_model(seed=5)
        x, y = random_batch(model, seed=6)
        base = forward_sparse(x, model)
        frozen = forward_sparse(x, model, frozen=base, keep_cache=False)
        stats = compute_load_stats(frozen.routing)
        recomputed = _weighted_bce(frozen.predictions, y, model.task_loss_weights) + \
            model.lb_strength * stats.value
        back = backward(base, model, y)
        assert abs(recomputed - back.total) < 1e-14


class TestTrain:
    def test_separable_task_reaches_high_auc(self):
        log = separable_log()
        config = TrainConfig(num_experts=2, k_shared=1, k_adaptive=1, d_hidden=8,
                             d_in=8, d_out=4, learning_rate=0.5, batch_size=32,
                             epochs=20, seed=0, lb_strength=0.0)
        result = train(log, config)
        assert result.epochs[-1].aucs[0] > 0.99

    def test_bitwise_deterministic(self):
        log = separable_log(n=120, seed=1)
        config = TrainConfig(num_experts=4, k_shared=1, k_adaptive=1, d_hidden=6,
                             d_in=6, d_out=4, learning_rate=0.2, batch_size=32,
                             epochs=3, seed=5)
        a = train(log, config)
        b = train(log, config)
        for ea, eb in zip(a.epochs, b.epochs):
            assert ea.task_value == eb.task_value
            assert ea.aucs == eb.aucs
            assert ea.load_cv == eb.load_cv
        for sa, sb in zip(a.steps, b.steps):
            assert sa.total == sb.total

    def test_sparse_full_budget_matches_dense_stepwise(self):
        log = separable_log(n=160, seed=2)
        base = dict(num_experts=4, d_hidden=6, d_in=6, d_out=4, learning_rate=0.2,
                    batch_size=32, epochs=10, seed=3, lb_strength=0.01)
        sparse = train(log, TrainConfig(mode="sparse", k_shared=4, k_adaptive=0, **base))
        dense = train(log, TrainConfig(mode="dense", k_shared=4, k_adaptive=0, **base))
        assert len(sparse.steps) == len(dense.steps) >= 50
        for ss, sd in zip(sparse.steps, dense.steps):
            assert abs(ss.total - sd.total) <= 1e-8 * abs(sd.total)

    def test_task_weight_scaling(self):
        model = tiny_model(seed=6, lb_strength=0.0)
        x, y = random_batch(model, seed=7)
        result = forward_sparse(x, model)
        base = backward(result, model, y)
        model.task_loss_weights = 3.0 * model.task_loss_weights
        scaled = backward(forward_sparse(x, model), model, y)
        assert abs(scaled.task_value - 3.0 * base.task_value) < 1e-12
        for name in base.gradients:
            assert np.abs(scaled.gradients[name] - 3.0 * base.gradients[name]).max() < 1e-12

    def test_monotone_loss_on_smooth_subcase(self):
        # single linear task, one expert, identity activations, small step
        log = separable_log(n=200, seed=4)
        config = TrainConfig(num_experts=1, k_shared=1, k_adaptive=0, d_hidden=4,
                             d_in=4, d_out=4, learning_rate=0.05, batch_size=200,
                             epochs=15, seed=1, lb_strength=0.0,
                             expert_nonlinearity="identity",
                             encoder_nonlinearity="identity")
        result = train(log, config)
        losses = [e.task_value for e in result.epochs]
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_nonfinite_batch_aborts_with_snapshot(self):
        # a NaN feature is the canonical divergence source: the forward pass
        # detects the non-finite product and training aborts with context
        log = separable_log(n=80, seed=5)
        log.features[13, 2] = np.nan
        config = TrainConfig(num_experts=2, k_shared=1, k_adaptive=1, d_hidden=6,
                             d_in=6, d_out=4, learning_rate=0.2, batch_size=40,
                             epochs=2, seed=2)
        with pytest.raises(TrainingDiverged) as excinfo:
            train(log, config)
        assert "epoch" in excinfo.value.snapshot
        assert "batch" in excinfo.value.snapshot

    def test_adam_runs_and_is_deterministic(self):
        log = separable_log(n=100, seed=6)
        config = TrainConfig(num_experts=2, k_shared=1, k_adaptive=1, d_hidden=6,
                             d_in=6, d_out=4, learning_rate=0.01, batch_size=50,
                             epochs=3, seed=7, optimizer="adam")
        assert isinstance(make_optimizer(config), AdamOptimizer)
        a = train(log, config)
        b = train(log, config)
        assert [s.total for s in a.steps] == [s.total for s in b.steps]

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(optimizer="momentum").validate()
        with pytest.raises(ConfigError):
            TrainConfig(num_experts=4, k_shared=3, k_adaptive=2).validate()


def test_lb_strength_changes_training_path():
    spec = SynthSpec(num_users=30, records_per_user=10, num_features=8,
                     positive_rates=(0.3, 0.2), seed=8)
    log = generate(spec)
    base = dict(num_experts=8, k_shared=1, k_adaptive=1, d_hidden=8, d_in=8,
                d_out=4, learning_rate=0.3, batch_size=50, epochs=4, seed=9)
    with_reg = train(log, TrainConfig(lb_strength=0.05, **base))
    without = train(log, TrainConfig(lb_strength=0.0, **base))
    assert with_reg.steps[-1].total != without.steps[-1].total
