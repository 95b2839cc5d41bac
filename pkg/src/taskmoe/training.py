"""Training: losses, hand-derived backprop, optimizers, and gradient checks.

The model graph is fixed and shallow, so reverse-mode gradients are written
out by hand rather than through an autodiff engine; that keeps the gradient
accumulation across deduplicated packed rows explicit and directly testable.
Expert selections are frozen within a step: the routing decision from the
forward pass defines the gradient path, and no gradient crosses the top-k
boundary. Finite-difference checks freeze the same selections so the
comparison is well-posed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .balance import LoadStats, SkewDiagnostics, compute_load_stats, lb_loss_gradient, skew_diagnostics
from .data import InteractionLog
from .errors import ConfigError, MetricError, NumericsError, ShapeError, StateError, TrainingDiverged
from .metrics import auc, gauc
from .model import ForwardResult, MoeModel, forward_dense, forward_sparse, init_model
from .routing import RoutingBudget

__all__ = [
    "AdamOptimizer",
    "BackwardResult",
    "EpochMetrics",
    "EvalSummary",
    "GradCheckReport",
    "SgdOptimizer",
    "StepMetrics",
    "TrainConfig",
    "TrainResult",
    "backward",
    "build_model",
    "evaluate",
    "grad_check",
    "make_optimizer",
    "task_loss",
    "total_loss",
    "train",
    "train_step",
]

# Predictions are clamped to [CLAMP_LO, CLAMP_HI] before the log; the clamp is
# part of the loss contract and its zero-derivative outside the open interval
# is honoured by the analytic gradient.
CLAMP_LO = 1e-7
CLAMP_HI = 1.0 - 1e-7


def _weighted_bce(predictions: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> float:
    clamped = np.clip(predictions, CLAMP_LO, CLAMP_HI)
    per = -(labels * np.log(clamped) + (1.0 - labels) * np.log1p(-clamped))
    return float((weights[:, None] * per).sum() / predictions.shape[1])


def task_loss(
    predictions: np.ndarray, labels: np.ndarray, weights: np.ndarray | None = None
) -> float:
    """Per-batch weighted binary cross-entropy, averaged over instances.

    ``predictions`` and ``labels`` are (T, B) (a single (B,) task is
    promoted); predictions must lie in [0, 1] and are clamped into
    [1e-7, 1 - 1e-7] before the logarithm.
    """
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
        y = y[None, :]
    if p.shape != y.shape or p.ndim != 2:
        raise ShapeError(f"predictions {p.shape} and labels {y.shape} must both be (T, B)")
    if p.shape[1] == 0:
        raise ShapeError("task loss of an empty batch")
    if np.isnan(p).any() or (p < 0).any() or (p > 1).any():
        raise NumericsError("predictions must lie in [0, 1]")
    if not np.isin(y, (0.0, 1.0)).all():
        raise NumericsError("labels must be 0 or 1")
    w = np.ones(p.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (p.shape[0],):
        raise ShapeError(f"expected {p.shape[0]} task weights, got shape {w.shape}")
    if (w < 0).any():
        raise NumericsError("task loss weights must be non-negative")
    return _weighted_bce(p, y, w)


def total_loss(task_value: float, lb_value: float, lb_strength: float) -> float:
    """Training objective: task loss plus lb_strength times the regularizer."""
    if lb_strength < 0:
        raise NumericsError(f"regularizer strength must be non-negative, got {lb_strength}")
    return float(task_value) + float(lb_strength) * float(lb_value)


@dataclass
class BackwardResult:
    gradients: dict[str, np.ndarray]
    task_value: float
    lb_value: float
    total: float
    stats: LoadStats


def _require_cache(result: ForwardResult) -> None:
    needed = ["inputs", "encoder_pre", "encoder_hidden", "hidden", "router_logits"]
    if result.mode == "sparse":
        needed += ["packed_in", "packed_out"]
    else:
        needed += ["expert_outputs"]
    for name in needed:
        if getattr(result, name) is None:
            raise StateError(
                f"backward needs the cached '{name}'; run the forward pass with keep_cache=True"
            )


def backward(
    result: ForwardResult,
    model: MoeModel,
    labels: np.ndarray,
    dense_probs_in_stats: bool = False,
) -> BackwardResult:
    """Exact gradients of the total loss for every parameter block.

    Selections are fixed (no gradient through top-k); an expert that appears
    in no packed row receives an exactly zero gradient block.
    """
    _require_cache(result)
    y = np.asarray(labels, dtype=np.float64)
    t_n, b_n = result.predictions.shape
    if y.shape != (t_n, b_n):
        raise ShapeError(f"labels shape {y.shape} does not match predictions ({t_n}, {b_n})")
    if not np.isin(y, (0.0, 1.0)).all():
        raise NumericsError("labels must be 0 or 1")

    lam = model.task_loss_weights
    yhat = result.predictions
    task_value = _weighted_bce(yhat, y, lam)
    stats = compute_load_stats(result.routing, dense_probs_in_stats)
    total = total_loss(task_value, stats.value, model.lb_strength)

    grads = {name: np.zeros_like(arr) for name, arr in model.parameter_blocks().items()}

    # heads: sigmoid + clamped BCE collapse to (yhat - y) wherever the clamp is inactive
    inside = (yhat > CLAMP_LO) & (yhat < CLAMP_HI)
    dlogit = lam[:, None] / b_n * np.where(inside, yhat - y, 0.0)
    d_reps = np.empty_like(result.task_reps)
    for t in range(t_n):
        grads[f"head_{t}.weight"] += dlogit[t][None, :] @ result.task_reps[t]
        grads[f"head_{t}.bias"] += dlogit[t].sum(keepdims=True)
        d_reps[t] = dlogit[t][:, None] * model.heads[t].weight[0][None, :]

    dz = np.zeros_like(result.router_logits)
    if model.lb_strength > 0:
        dz += model.lb_strength * lb_loss_gradient(stats, result.routing)

    d_hidden = np.zeros_like(result.hidden)
    if result.mode == "sparse":
        plan = result.plan
        routing = result.routing
        packed_out = result.packed_out
        d_packed = np.zeros_like(packed_out)
        b_idx = np.arange(b_n)[:, None]
        for t in range(t_n):
            act = routing.active[t]
            rows = plan.row_lookup(np.broadcast_to(b_idx, act.shape), act)
            w_sel = np.take_along_axis(routing.weights[t], act, axis=1)
            o_sel = packed_out[rows]
            g_sel = np.einsum("bd,bkd->bk", d_reps[t], o_sel)
            np.add.at(
                d_packed,
                rows.ravel(),
                (w_sel[..., None] * d_reps[t][:, None, :]).reshape(-1, packed_out.shape[1]),
            )
            # softmax over the active set only
            inner = (g_sel * w_sel).sum(axis=1, keepdims=True)
            dz[t][b_idx, act] += w_sel * (g_sel - inner)
        if model.experts.nonlinearity == "relu":
            d_pre = d_packed * (packed_out > 0)
        else:
            d_pre = d_packed
        d_packed_in = np.zeros_like(result.packed_in)
        for e, layer in enumerate(model.experts.layers):
            lo, hi = plan.segment_offsets[e], plan.segment_offsets[e + 1]
            if lo == hi:
                continue
            grads[f"expert_{e}.weight"] += d_pre[lo:hi].T @ result.packed_in[lo:hi]
            grads[f"expert_{e}.bias"] += d_pre[lo:hi].sum(axis=0)
            d_packed_in[lo:hi] = d_pre[lo:hi] @ layer.weight
        np.add.at(d_hidden, plan.gather_instances, d_packed_in)
    else:
        probs = result.routing.weights  # dense gates: full softmax
        outputs = result.expert_outputs
        d_outputs = np.einsum("tbe,tbd->bed", probs, d_reps)
        d_probs = np.einsum("tbd,bed->tbe", d_reps, outputs)
        inner = (d_probs * probs).sum(axis=2, keepdims=True)
        dz += probs * (d_probs - inner)
        if model.experts.nonlinearity == "relu":
            d_pre_all = d_outputs * (outputs > 0)
        else:
            d_pre_all = d_outputs
        for e, layer in enumerate(model.experts.layers):
            grads[f"expert_{e}.weight"] += d_pre_all[:, e, :].T @ result.hidden
            grads[f"expert_{e}.bias"] += d_pre_all[:, e, :].sum(axis=0)
            d_hidden += d_pre_all[:, e, :] @ layer.weight

    for t in range(t_n):
        grads[f"router_{t}.weight"] += dz[t].T @ result.hidden
        grads[f"router_{t}.bias"] += dz[t].sum(axis=0)
        d_hidden += dz[t] @ model.routers.maps[t].weight

    grads["encoder2.weight"] += d_hidden.T @ result.encoder_hidden
    grads["encoder2.bias"] += d_hidden.sum(axis=0)
    d_mid = d_hidden @ model.encoder2.weight
    if model.encoder_nonlinearity == "relu":
        d_enc_pre = d_mid * (result.encoder_pre > 0)
    else:
        d_enc_pre = d_mid
    grads["encoder1.weight"] += d_enc_pre.T @ result.inputs
    grads["encoder1.bias"] += d_enc_pre.sum(axis=0)

    return BackwardResult(
        gradients=grads, task_value=task_value, lb_value=stats.value, total=total, stats=stats
    )


class SgdOptimizer:
    """Plain gradient descent with a constant step."""

    def __init__(self, learning_rate: float) -> None:
        self.learning_rate = learning_rate

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            p -= self.learning_rate * grads[name]


class AdamOptimizer:
    """Adaptive-moment estimation with bias correction."""

    def __init__(
        self,
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.steps += 1
        c1 = 1.0 - self.beta1**self.steps
        c2 = 1.0 - self.beta2**self.steps
        for name, p in params.items():
            g = grads[name]
            m = self._m.setdefault(name, np.zeros_like(p))
            v = self._v.setdefault(name, np.zeros_like(p))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    """Everything that determines a training run; the seed fixes all draws."""

    num_experts: int = 8
    k_shared: int = 1
    k_adaptive: int = 1
    d_hidden: int = 32
    d_in: int = 32
    d_out: int = 16
    learning_rate: float = 0.1
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    optimizer: str = "sgd"
    lb_strength: float = 0.01
    mode: str = "sparse"
    expert_nonlinearity: str = "relu"
    encoder_nonlinearity: str = "relu"
    task_loss_weights: tuple[float, ...] | None = None
    router_task_weights: tuple[float, ...] | None = None
    dense_probs_in_stats: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    @property
    def budget(self) -> RoutingBudget:
        return RoutingBudget(k_shared=self.k_shared, k_adaptive=self.k_adaptive)

    def validate(self) -> None:
        for name in ("num_experts", "d_hidden", "d_in", "d_out", "batch_size", "epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"key '{name}': must be positive, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise ConfigError(f"key 'learning_rate': must be positive, got {self.learning_rate}")
        if self.lb_strength < 0:
            raise ConfigError(f"key 'lb_strength': must be non-negative, got {self.lb_strength}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"key 'optimizer': expected 'sgd' or 'adam', got '{self.optimizer}'")
        if self.mode not in ("sparse", "dense"):
            raise ConfigError(f"key 'mode': expected 'sparse' or 'dense', got '{self.mode}'")
        self.budget.validate(self.num_experts)


def make_optimizer(config: TrainConfig) -> SgdOptimizer | AdamOptimizer:
    if config.optimizer == "adam":
        return AdamOptimizer(
            config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps
        )
    return SgdOptimizer(config.learning_rate)


def build_model(
    config: TrainConfig,
    num_features: int,
    num_tasks: int,
    rng: np.random.Generator | None = None,
) -> MoeModel:
    """Seeded model construction matching a training configuration."""
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[0])
    weights = None if config.task_loss_weights is None else np.asarray(config.task_loss_weights)
    pool_w = None if config.router_task_weights is None else np.asarray(config.router_task_weights)
    return init_model(
        rng,
        num_features=num_features,
        d_hidden=config.d_hidden,
        d_in=config.d_in,
        d_out=config.d_out,
        num_experts=config.num_experts,
        num_tasks=num_tasks,
        budget=config.budget,
        task_loss_weights=weights,
        lb_strength=config.lb_strength,
        expert_nonlinearity=config.expert_nonlinearity,
        encoder_nonlinearity=config.encoder_nonlinearity,
        router_task_weights=pool_w,
    )


@dataclass(frozen=True)
class StepMetrics:
    task_value: float
    lb_value: float
    total: float


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    task_value: float
    lb_value: float
    total: float
    aucs: tuple[float, ...]
    gaucs: tuple[float, ...]
    load_cv: float
    load_max_mean: float
    dead_fraction: float


@dataclass
class TrainResult:
    model: MoeModel
    epochs: list[EpochMetrics]
    steps: list[StepMetrics]
    seconds: float


def train_step(
    model: MoeModel,
    batch: np.ndarray,
    labels: np.ndarray,
    optimizer: SgdOptimizer | AdamOptimizer,
    config: TrainConfig,
) -> StepMetrics:
    if config.mode == "dense":
        result = forward_dense(batch, model)
    else:
        result = forward_sparse(batch, model)
    back = backward(result, model, labels, config.dense_probs_in_stats)
    if not np.isfinite(back.total):
        raise TrainingDiverged(
            "loss became non-finite",
            snapshot={
                "task_value": back.task_value,
                "lb_value": back.lb_value,
                "max_abs_prediction": float(np.abs(result.predictions).max()),
            },
        )
    optimizer.step(model.parameter_blocks(), back.gradients)
    return StepMetrics(task_value=back.task_value, lb_value=back.lb_value, total=back.total)


@dataclass(frozen=True)
class EvalSummary:
    aucs: tuple[float, ...]
    gaucs: tuple[float, ...]
    lb_value: float
    skew: SkewDiagnostics


def evaluate(model: MoeModel, log: InteractionLog, config: TrainConfig) -> EvalSummary:
    """Forward sweep over a log: ranking metrics per task plus aggregated
    expert-utilization diagnostics (counts summed across eval batches)."""
    n = log.num_records
    t_n = log.num_tasks
    preds = np.empty((t_n, n))
    counts = np.zeros(model.num_experts, dtype=np.int64)
    mass_raw = np.zeros(model.num_experts)
    lb_values = []
    total_bt = 0
    for s in range(0, n, config.batch_size):
        x = log.features[s : s + config.batch_size]
        if config.mode == "dense":
            result = forward_dense(x, model, keep_cache=False)
        else:
            result = forward_sparse(x, model, keep_cache=False)
        preds[:, s : s + x.shape[0]] = result.predictions
        stats = compute_load_stats(result.routing, config.dense_probs_in_stats)
        counts += stats.counts
        mass_raw += stats.mass * (stats.batch_size * stats.num_tasks)
        total_bt += stats.batch_size * stats.num_tasks
        lb_values.append(stats.value)
    aggregated = LoadStats(
        frequency=counts / total_bt,
        mass=mass_raw / total_bt,
        value=float(np.mean(lb_values)),
        counts=counts,
        batch_size=n,
        num_tasks=t_n,
        k_budget=model.budget.k_total if config.mode == "sparse" else model.num_experts,
        from_dense_probs=config.dense_probs_in_stats,
    )
    aucs, gaucs = [], []
    labels = log.labels
    for t in range(t_n):
        try:
            aucs.append(auc(preds[t], labels[:, t]))
        except MetricError:
            aucs.append(float("nan"))
        try:
            gaucs.append(gauc(preds[t], labels[:, t], log.user_ids))
        except MetricError:
            gaucs.append(float("nan"))
    return EvalSummary(
        aucs=tuple(aucs),
        gaucs=tuple(gaucs),
        lb_value=aggregated.value,
        skew=skew_diagnostics(aggregated),
    )


def train(
    log: InteractionLog, config: TrainConfig, valid: InteractionLog | None = None
) -> TrainResult:
    """Deterministic training loop; emits one metrics row per epoch.

    Evaluation metrics come from ``valid`` when given, otherwise from the
    training log itself.
    """
    config.validate()
    if log.num_records == 0:
        raise ConfigError("cannot train on an empty log")
    t_started = time.perf_counter()
    init_seq, batch_seq = np.random.SeedSequence(config.seed).spawn(2)
    model = build_model(config, log.num_features, log.num_tasks, np.random.default_rng(init_seq))
    rng = np.random.default_rng(batch_seq)
    optimizer = make_optimizer(config)
    features = log.features
    labels_tb = log.labels.T.astype(np.float64)
    n = log.num_records
    eval_log = valid if valid is not None else log
    epochs: list[EpochMetrics] = []
    steps: list[StepMetrics] = []
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for s in range(0, n, config.batch_size):
            idx = perm[s : s + config.batch_size]
            try:
                sm = train_step(model, features[idx], labels_tb[:, idx], optimizer, config)
            except (TrainingDiverged, NumericsError) as err:
                snapshot = getattr(err, "snapshot", {})
                raise TrainingDiverged(
                    f"training diverged at epoch {epoch}, batch {batches}: {err}",
                    snapshot={"epoch": epoch, "batch": batches, **snapshot},
                ) from err
            steps.append(sm)
            sums += (sm.task_value, sm.lb_value, sm.total)
            batches += 1
        ev = evaluate(model, eval_log, config)
        epochs.append(
            EpochMetrics(
                epoch=epoch,
                task_value=sums[0] / batches,
                lb_value=sums[1] / batches,
                total=sums[2] / batches,
                aucs=ev.aucs,
                gaucs=ev.gaucs,
                load_cv=ev.skew.cv,
                load_max_mean=ev.skew.max_mean_ratio,
                dead_fraction=ev.skew.dead_fraction,
            )
        )
    return TrainResult(
        model=model, epochs=epochs, steps=steps, seconds=time.perf_counter() - t_started
    )


@dataclass
class GradCheckReport:
    block_errors: dict[str, float]
    max_rel_error: float
    tolerance: float
    step: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def failures(self) -> list[str]:
        return [k for k, v in self.block_errors.items() if v >= self.tolerance]


def grad_check(
    model: MoeModel,
    batch: np.ndarray,
    labels: np.ndarray,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    mode: str = "sparse",
    dense_probs_in_stats: bool = False,
) -> GradCheckReport:
    """Central finite differences of the total loss against the analytic
    gradients, with expert selections frozen at the base forward pass.

    Relative error per entry uses max(|analytic|, |numeric|, 1e-6) as the
    denominator; the report keeps the per-block maximum.
    """
    if model.num_parameters() > 10_000:
        raise ConfigError(
            f"grad_check is limited to 10k parameters, model has {model.num_parameters()}"
        )
    y = np.asarray(labels, dtype=np.float64)
    if mode == "dense":
        base = forward_dense(batch, model)
    else:
        base = forward_sparse(batch, model)
    back = backward(base, model, y, dense_probs_in_stats)

    def loss_now() -> float:
        if mode == "dense":
            r = forward_dense(batch, model, keep_cache=False)
        else:
            r = forward_sparse(batch, model, frozen=base, keep_cache=False)
        stats = compute_load_stats(r.routing, dense_probs_in_stats)
        return total_loss(
            _weighted_bce(r.predictions, y, model.task_loss_weights),
            stats.value,
            model.lb_strength,
        )

    block_errors: dict[str, float] = {}
    for name, arr in model.parameter_blocks().items():
        flat = arr.reshape(-1)
        analytic = back.gradients[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            plus = loss_now()
            flat[i] = saved - step
            minus = loss_now()
            flat[i] = saved
            numeric = (plus - minus) / (2.0 * step)
            denom = max(abs(analytic[i]), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
        block_errors[name] = worst
    return GradCheckReport(
        block_errors=block_errors,
        max_rel_error=max(block_errors.values()),
        tolerance=tolerance,
        step=step,
    )
