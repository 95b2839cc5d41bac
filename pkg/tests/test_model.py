import numpy as np
import pytest

from taskmoe.errors import ConfigError, ShapeError, StateError
from taskmoe.experts import ExpertPool
from taskmoe.linalg import Affine, FlopCounter, softmax
from taskmoe.model import MoeModel, dense_mmoe_forward, forward_dense, forward_sparse, init_model
from taskmoe.routing import RouterBank, RoutingBudget


def tiny_model(seed=0, num_features=6, d_hidden=7, d_in=5, d_out=4, experts=6, tasks=3,
               k_shared=1, k_adaptive=2, lb_strength=0.0, expert_nonlinearity="identity"):
    return init_model(
        np.random.default_rng(seed),
        num_features=num_features,
        d_hidden=d_hidden,
        d_in=d_in,
        d_out=d_out,
        num_experts=experts,
        num_tasks=tasks,
        budget=RoutingBudget(k_shared, k_adaptive),
        lb_strength=lb_strength,
        expert_nonlinearity=expert_nonlinearity,
    )


def hand_built_model(expert_rows, d_in, tasks=2):
    """Identity-friendly model: experts output fixed rows regardless of input."""
    experts = ExpertPool(
        layers=[Affine(np.zeros((len(row), d_in)), np.asarray(row, float)) for row in expert_rows],
        nonlinearity="identity",
    )
    d_out = len(expert_rows[0])
    routers = RouterBank(
        maps=[Affine(np.zeros((len(expert_rows), d_in)), np.zeros(len(expert_rows))) for _ in range(tasks)]
    )
    return MoeModel(
        encoder1=Affine(np.eye(d_in), np.zeros(d_in)),
        encoder2=Affine(np.eye(d_in), np.zeros(d_in)),
        experts=experts,
        routers=routers,
        heads=[Affine(np.zeros((1, d_out)), np.zeros(1)) for _ in range(tasks)],
        task_loss_weights=np.ones(tasks),
        lb_strength=0.0,
        budget=RoutingBudget(len(expert_rows), 0),
        encoder_nonlinearity="identity",
    )


class TestDenseMmoeForward:
    def test_identity_experts_reproduce_input(self):
        d = 4
        experts = ExpertPool(layers=[Affine(np.eye(d), np.zeros(d)) for _ in range(2)])
        rng = np.random.default_rng(0)
        routers = RouterBank(maps=[Affine(rng.normal(size=(2, d)), rng.normal(size=2))
                                   for _ in range(3)])
        model = MoeModel(
            encoder1=Affine(np.eye(d), np.zeros(d)),
            encoder2=Affine(np.eye(d), np.zeros(d)),
            experts=experts,
            routers=routers,
            heads=[Affine(np.zeros((1, d)), np.zeros(1)) for _ in range(3)],
            task_loss_weights=np.ones(3),
            lb_strength=0.0,
            budget=RoutingBudget(2, 0),
            encoder_nonlinearity="identity",
        )
        h = rng.normal(size=d)
        reps = dense_mmoe_forward(h, model)
        # any weights on the simplex mix identical expert outputs back to h
        assert np.abs(reps - h[None, :]).max() < 1e-12

    def test_uniform_gate_basis_experts(self):
        model = hand_built_model([[1, 0, 0], [0, 1, 0], [0, 0, 1]], d_in=2)
        reps = dense_mmoe_forward(np.zeros(2), model)
        assert np.abs(reps - 1.0 / 3.0).max() < 1e-15

    def test_term_by_term_oracle(self):
        model = tiny_model(seed=3, expert_nonlinearity="relu")
        rng = np.random.default_rng(4)
        hidden = rng.normal(size=(5, model.d_in))
        reps = dense_mmoe_forward(hidden, model)
        for b in range(5):
            logits = np.stack([m.apply(hidden[b]) for m in model.routers.maps])
            probs = softmax(logits, axis=1)
            for t in range(model.num_tasks):
                acc = np.zeros(model.d_out)
                for e, layer in enumerate(model.experts.layers):
                    out = np.maximum(layer.weight @ hidden[b] + layer.bias, 0.0)
                    acc += probs[t, e] * out
                assert np.abs(reps[t, b] - acc).max() < 1e-10 * max(1.0, np.abs(acc).max())

    def test_dimension_mismatch(self):
        model = tiny_model()
        with pytest.raises(ShapeError):
            dense_mmoe_forward(np.zeros(model.d_in + 1), model)


class TestFlopAccounting:
    def test_dense_closed_form_exact(self):
        model = tiny_model(seed=5)
        b = 9
        counter = FlopCounter()
        forward_dense(np.random.default_rng(6).standard_normal((b, model.num_features)),
                      model, counter)
        e, t = model.num_experts, model.num_tasks
        expected = (
            b * model.num_features * model.d_hidden      # encoder layer 1
            + b * model.d_hidden * model.d_in            # encoder layer 2
            + b * e * model.d_in * model.d_out           # expert matmuls
            + t * b * model.d_in * e                     # gates
            + t * b * model.d_out * 1                    # heads
        )
        assert counter.multiply_adds == expected

    def test_sparse_expert_stage_proportional_to_packed_rows(self):
        model = tiny_model(seed=7)
        x = np.random.default_rng(8).standard_normal((11, model.num_features))
        counter = FlopCounter()
        result = forward_sparse(x, model, counter)
        assert result.expert_flops == result.plan.total_rows * model.d_in * model.d_out
        dense_counter = FlopCounter()
        dense = forward_dense(x, model, dense_counter)
        ratio = result.expert_flops / dense.expert_flops
        assert abs(ratio - result.plan.total_rows / (11 * model.num_experts)) < 1e-12


class TestForwardSparse:
    def test_full_activation_equals_dense(self):
        model = tiny_model(seed=9, k_shared=6, k_adaptive=0, expert_nonlinearity="relu")
        x = np.random.default_rng(10).standard_normal((8, model.num_features))
        sparse = forward_sparse(x, model)
        dense = forward_dense(x, model)
        scale = max(1.0, np.abs(dense.predictions).max())
        assert np.abs(sparse.predictions - dense.predictions).max() < 1e-10 * scale

    def test_union_bound_large_pool(self):
        model = tiny_model(seed=11, num_features=8, d_in=6, d_out=4, experts=128,
                           tasks=4, k_shared=4, k_adaptive=4)
        x = np.random.default_rng(12).standard_normal((16, 8))
        result = forward_sparse(x, model)
        sizes = [u.size for u in result.routing.unions]
        assert all(8 <= s <= 20 for s in sizes)

    def test_matches_non_dedup_oracle(self):
        for seed in range(10):
            model = tiny_model(seed=seed, expert_nonlinearity="relu" if seed % 2 else "identity")
            x = np.random.default_rng(100 + seed).standard_normal((6, model.num_features))
            result = forward_sparse(x, model)
            # oracle: run every selected expert separately for every task
            hidden = result.hidden
            for t in range(model.num_tasks):
                for b in range(6):
                    acc = np.zeros(model.d_out)
                    for e in result.routing.active[t, b]:
                        layer = model.experts.layers[e]
                        out = layer.weight @ hidden[b] + layer.bias
                        if model.experts.nonlinearity == "relu":
                            out = np.maximum(out, 0.0)
                        acc += result.routing.weights[t, b, e] * out
                    head = model.heads[t]
                    logit = float(head.weight[0] @ acc + head.bias[0])
                    expected = 1.0 / (1.0 + np.exp(-logit))
                    denom = max(abs(expected), 1e-12)
                    assert abs(result.predictions[t, b] - expected) / denom < 1e-10

    def test_frozen_reuses_selections(self):
        model = tiny_model(seed=13)
        x = np.random.default_rng(14).standard_normal((5, model.num_features))
        base = forward_sparse(x, model)
        model.routers.maps[0].weight[0, 0] += 0.5  # logits move, selections stay frozen
        frozen = forward_sparse(x, model, frozen=base)
        assert np.array_equal(frozen.routing.active, base.routing.active)
        assert frozen.plan is base.plan
        assert not np.array_equal(frozen.routing.weights, base.routing.weights)

    def test_frozen_requires_sparse_base(self):
        model = tiny_model(seed=15)
        x = np.random.default_rng(16).standard_normal((4, model.num_features))
        dense = forward_dense(x, model)
        with pytest.raises(StateError):
            forward_sparse(x, model, frozen=dense)


class TestModelValidation:
    def test_inconsistent_dims_rejected(self):
        model = tiny_model()
        with pytest.raises(ConfigError):
            MoeModel(
                encoder1=model.encoder1,
                encoder2=model.encoder2,
                experts=model.experts,
                routers=model.routers,
                heads=model.heads[:-1],
                task_loss_weights=model.task_loss_weights,
                lb_strength=0.0,
                budget=model.budget,
            )

    def test_parameter_blocks_cover_everything(self):
        model = tiny_model()
        blocks = model.parameter_blocks()
        total = sum(v.size for v in blocks.values())
        assert total == model.num_parameters()
        assert blocks["encoder1.weight"] is model.encoder1.weight
        assert f"expert_{model.num_experts - 1}.bias" in blocks
