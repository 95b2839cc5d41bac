"""Model container plus the dense and sparse forward pipelines.

The model is a fixed, shallow graph: a two-layer encoder, a pool of affine
experts, one router and one sigmoid head per task. ``forward_dense`` runs
every expert for every instance and mixes with full softmax gates;
``forward_sparse`` routes, packs the per-instance expert unions, runs the
grouped segment transform, and reconstructs -- the two must agree whenever
the budget covers the whole pool.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .execution import ExecutionPlan, build_execution_plan, grouped_gemm, reconstruct_task_reps
from .experts import ExpertPool, apply_nonlinearity, init_expert_pool
from .linalg import Affine, FlopCounter, init_affine, sigmoid, softmax
from .routing import BatchRouting, RouterBank, RoutingBudget, dense_routing, route_batch

__all__ = [
    "ForwardResult",
    "MoeModel",
    "dense_mmoe_forward",
    "forward_dense",
    "forward_sparse",
    "init_model",
]

ROUTER_INIT_SCALE = 1e-3  # keeps early routing near-uniform to avoid instant collapse
ENCODER_BIAS_INIT = 0.01  # keeps rectified units off the all-dead state at init


@dataclass
class MoeModel:
    """Full parameter set: encoder, expert pool, task routers, task heads."""

    encoder1: Affine          # d -> d_hidden
    encoder2: Affine          # d_hidden -> d_in
    experts: ExpertPool       # E maps d_in -> d_out
    routers: RouterBank       # T maps d_in -> E
    heads: list[Affine]       # T maps d_out -> 1
    task_loss_weights: np.ndarray
    lb_strength: float
    budget: RoutingBudget
    encoder_nonlinearity: str = "relu"

    def __post_init__(self) -> None:
        self.task_loss_weights = np.asarray(self.task_loss_weights, dtype=np.float64)
        t = self.routers.num_tasks
        if len(self.heads) != t:
            raise ConfigError(f"{len(self.heads)} heads for {t} routers")
        if self.task_loss_weights.shape != (t,):
            raise ConfigError(f"expected {t} task loss weights")
        if (self.task_loss_weights < 0).any() or self.lb_strength < 0:
            raise ConfigError("loss weights and regularizer strength must be non-negative")
        if self.encoder1.d_out != self.encoder2.d_in:
            raise ConfigError("encoder layer widths do not chain")
        if self.encoder2.d_out != self.experts.d_in or self.encoder2.d_out != self.routers.d_in:
            raise ConfigError("encoder output width must match expert and router input")
        for i, h in enumerate(self.heads):
            if h.d_in != self.experts.d_out or h.d_out != 1:
                raise ConfigError(f"head {i} must map d_out -> 1")
        if self.routers.num_experts != self.experts.num_experts:
            raise ConfigError("router width must equal the expert count")
        self.budget.validate(self.experts.num_experts)

    @property
    def num_features(self) -> int:
        return self.encoder1.d_in

    @property
    def d_hidden(self) -> int:
        return self.encoder1.d_out

    @property
    def d_in(self) -> int:
        return self.encoder2.d_out

    @property
    def d_out(self) -> int:
        return self.experts.d_out

    @property
    def num_experts(self) -> int:
        return self.experts.num_experts

    @property
    def num_tasks(self) -> int:
        return self.routers.num_tasks

    def parameter_blocks(self) -> dict[str, np.ndarray]:
        """Named views of every parameter array, in checkpoint order."""
        blocks: dict[str, np.ndarray] = {
            "encoder1.weight": self.encoder1.weight,
            "encoder1.bias": self.encoder1.bias,
            "encoder2.weight": self.encoder2.weight,
            "encoder2.bias": self.encoder2.bias,
        }
        for e, layer in enumerate(self.experts.layers):
            blocks[f"expert_{e}.weight"] = layer.weight
            blocks[f"expert_{e}.bias"] = layer.bias
        for t, m in enumerate(self.routers.maps):
            blocks[f"router_{t}.weight"] = m.weight
            blocks[f"router_{t}.bias"] = m.bias
        for t, h in enumerate(self.heads):
            blocks[f"head_{t}.weight"] = h.weight
            blocks[f"head_{t}.bias"] = h.bias
        return blocks

    def num_parameters(self) -> int:
        return sum(v.size for v in self.parameter_blocks().values())


def init_model(
    rng: np.random.Generator,
    num_features: int,
    d_hidden: int,
    d_in: int,
    d_out: int,
    num_experts: int,
    num_tasks: int,
    budget: RoutingBudget,
    task_loss_weights: np.ndarray | None = None,
    lb_strength: float = 0.0,
    expert_nonlinearity: str = "identity",
    encoder_nonlinearity: str = "relu",
    router_task_weights: np.ndarray | None = None,
) -> MoeModel:
    """Fan-in-scaled uniform init everywhere except the routers, which start
    near zero so early routing is close to uniform."""
    encoder1 = init_affine(rng, d_hidden, num_features, bias_value=ENCODER_BIAS_INIT)
    encoder2 = init_affine(rng, d_in, d_hidden, bias_value=ENCODER_BIAS_INIT)
    experts = init_expert_pool(rng, num_experts, d_in, d_out, expert_nonlinearity)
    routers = RouterBank(
        maps=[
            init_affine(rng, num_experts, d_in, scale=ROUTER_INIT_SCALE / np.sqrt(d_in))
            for _ in range(num_tasks)
        ],
        task_weights=router_task_weights,
    )
    heads = [init_affine(rng, 1, d_out) for _ in range(num_tasks)]
    weights = np.ones(num_tasks) if task_loss_weights is None else task_loss_weights
    return MoeModel(
        encoder1=encoder1,
        encoder2=encoder2,
        experts=experts,
        routers=routers,
        heads=heads,
        task_loss_weights=weights,
        lb_strength=lb_strength,
        budget=budget,
        encoder_nonlinearity=encoder_nonlinearity,
    )


@dataclass
class ForwardResult:
    """Predictions plus every intermediate the hand-derived backward needs."""

    mode: str                      # "sparse" or "dense"
    predictions: np.ndarray        # (T, B) sigmoid outputs
    head_logits: np.ndarray        # (T, B)
    task_reps: np.ndarray          # (T, B, d_out)
    routing: BatchRouting
    plan: ExecutionPlan | None     # sparse mode only
    expert_flops: int              # multiply-adds spent in the expert stage
    # cached intermediates (None when keep_cache=False)
    inputs: np.ndarray | None = None
    encoder_pre: np.ndarray | None = None
    encoder_hidden: np.ndarray | None = None
    hidden: np.ndarray | None = None
    router_logits: np.ndarray | None = None
    packed_in: np.ndarray | None = None
    packed_pre: np.ndarray | None = None
    packed_out: np.ndarray | None = None
    expert_outputs: np.ndarray | None = None  # dense mode: (B, E, d_out)

    def mean_union(self) -> float:
        return float(np.mean([u.size for u in self.routing.unions]))

    def max_union(self) -> int:
        return int(max((u.size for u in self.routing.unions), default=0))


def _encode(
    batch: np.ndarray, model: MoeModel, counter: FlopCounter | None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.num_features:
        raise ShapeError(
            f"batch has shape {x.shape}, model expects (B, {model.num_features})"
        )
    pre = model.encoder1.apply(x, counter)
    mid = apply_nonlinearity(model.encoder_nonlinearity, pre)
    hidden = model.encoder2.apply(mid, counter)
    return pre, mid, hidden


def _heads(
    task_reps: np.ndarray, model: MoeModel, counter: FlopCounter | None
) -> tuple[np.ndarray, np.ndarray]:
    logits = np.stack(
        [model.heads[t].apply(task_reps[t], counter)[:, 0] for t in range(model.num_tasks)]
    )
    return logits, sigmoid(logits)


def dense_mmoe_forward(
    hidden: np.ndarray, model: MoeModel, counter: FlopCounter | None = None
) -> np.ndarray:
    """Dense baseline on an encoded batch: all experts run, full softmax gates.

    Accepts a single (d_in,) representation or a (B, d_in) batch; returns the
    per-task mixtures, (T, d_out) or (T, B, d_out) respectively.
    """
    h = np.asarray(hidden, dtype=np.float64)
    single = h.ndim == 1
    h2 = h[None, :] if single else h
    if h2.shape[1] != model.d_in:
        raise ShapeError(f"hidden width {h2.shape[1]} != model d_in {model.d_in}")
    reps, _, _, _ = _dense_core(h2, model, counter)
    return reps[:, 0, :] if single else reps


def _dense_core(
    hidden: np.ndarray, model: MoeModel, counter: FlopCounter | None
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    logits = model.routers.logits(hidden, counter)          # (T, B, E)
    probs = softmax(logits, axis=2)
    outputs = model.experts.apply_all(hidden, counter)      # (B, E, d_out)
    reps = np.einsum("tbe,bed->tbd", probs, outputs)
    return reps, probs, outputs, logits


def forward_dense(
    batch: np.ndarray,
    model: MoeModel,
    counter: FlopCounter | None = None,
    keep_cache: bool = True,
) -> ForwardResult:
    """Full dense pipeline: encoder, dense mixture-of-experts, task heads."""
    enc_pre, enc_mid, hidden = _encode(batch, model, counter)
    reps, probs, outputs, logits = _dense_core(hidden, model, counter)
    head_logits, preds = _heads(reps, model, counter)
    b = hidden.shape[0]
    flops = b * model.num_experts * model.d_in * model.d_out
    return ForwardResult(
        mode="dense",
        predictions=preds,
        head_logits=head_logits,
        task_reps=reps,
        routing=dense_routing(probs),
        plan=None,
        expert_flops=flops,
        inputs=np.asarray(batch, dtype=np.float64) if keep_cache else None,
        encoder_pre=enc_pre if keep_cache else None,
        encoder_hidden=enc_mid if keep_cache else None,
        hidden=hidden if keep_cache else None,
        router_logits=logits if keep_cache else None,
        expert_outputs=outputs if keep_cache else None,
    )


def forward_sparse(
    batch: np.ndarray,
    model: MoeModel,
    counter: FlopCounter | None = None,
    frozen: ForwardResult | None = None,
    keep_cache: bool = True,
) -> ForwardResult:
    """Sparse pipeline: route, pack the per-instance unions, run the grouped
    segment transform once per activated (instance, expert) pair, reconstruct.

    With ``frozen`` set, the expert selections and execution plan of a
    previous result are reused and only the mixture weights are recomputed
    from the fresh logits -- the fixed-selection view that gradient checks
    and the hand-derived backward both rely on.
    """
    enc_pre, enc_mid, hidden = _encode(batch, model, counter)
    logits = model.routers.logits(hidden, counter)
    if frozen is None:
        routing = route_batch(logits, model.budget, model.routers.task_weights)
        plan = build_execution_plan(routing.unions, model.num_experts)
    else:
        if frozen.mode != "sparse" or frozen.plan is None:
            raise StateError("frozen forward result must come from the sparse pipeline")
        from .routing import _renormalized_weights_batch  # shared kernel, not public API

        routing = BatchRouting(
            shared=frozen.routing.shared,
            adaptive=frozen.routing.adaptive,
            active=frozen.routing.active,
            unions=frozen.routing.unions,
            weights=_renormalized_weights_batch(logits, frozen.routing.active),
            full_probs=softmax(logits, axis=2),
        )
        plan = frozen.plan
    packed_in = hidden[plan.gather_instances]
    packed_out, packed_pre = grouped_gemm(
        packed_in, model.experts, plan, counter, return_preactivation=True
    )
    reps = reconstruct_task_reps(packed_out, plan, routing)
    head_logits, preds = _heads(reps, model, counter)
    flops = plan.total_rows * model.d_in * model.d_out
    return ForwardResult(
        mode="sparse",
        predictions=preds,
        head_logits=head_logits,
        task_reps=reps,
        routing=routing,
        plan=plan,
        expert_flops=flops,
        inputs=np.asarray(batch, dtype=np.float64) if keep_cache else None,
        encoder_pre=enc_pre if keep_cache else None,
        encoder_hidden=enc_mid if keep_cache else None,
        hidden=hidden if keep_cache else None,
        router_logits=logits if keep_cache else None,
        packed_in=packed_in if keep_cache else None,
        packed_pre=packed_pre if keep_cache else None,
        packed_out=packed_out if keep_cache else None,
    )
