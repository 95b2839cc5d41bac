"""Expert selection: dense gates, per-task top-k, and two-stage routing.

Routing is decided per instance. Every task router scores all experts; the
two-stage scheme first picks a shared subset from score mass pooled across
tasks, then lets each task add private experts from the complement, and
finally renormalizes mixture weights over each task's active set only. The
batch functions vectorize across instances; the per-instance wrappers return
a single :class:`RoutingDecision`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericsError, ShapeError
from .linalg import Affine, FlopCounter, softmax

__all__ = [
    "BatchRouting",
    "RouterBank",
    "RoutingBudget",
    "RoutingDecision",
    "compute_global_scores",
    "dense_routing",
    "naive_route_batch",
    "naive_sparse_route",
    "progressive_route",
    "renormalized_weights",
    "route_batch",
    "stack_decisions",
]


@dataclass(frozen=True)
class RoutingBudget:
    """Per-task activation budget split into shared and task-adaptive counts."""

    k_shared: int
    k_adaptive: int

    @property
    def k_total(self) -> int:
        return self.k_shared + self.k_adaptive

    def validate(self, num_experts: int) -> None:
        if self.k_shared < 0 or self.k_adaptive < 0:
            raise ConfigError(
                f"budget counts must be non-negative, got shared={self.k_shared} "
                f"adaptive={self.k_adaptive}"
            )
        if self.k_total < 1:
            raise ConfigError("budget must activate at least one expert per task")
        if self.k_total > num_experts:
            # equivalently a stage-II candidate shortage: E - k_shared < k_adaptive
            raise ConfigError(
                f"budget k={self.k_total} exceeds expert count {num_experts}: "
                f"stage-II would have only {num_experts - self.k_shared} candidates "
                f"for {self.k_adaptive} adaptive picks"
            )


@dataclass
class RouterBank:
    """One affine router per task (d_in -> E) plus pooling weights per task."""

    maps: list[Affine]
    task_weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not self.maps:
            raise ConfigError("router bank needs at least one task router")
        e = self.maps[0].d_out
        d = self.maps[0].d_in
        for i, m in enumerate(self.maps):
            if m.d_out != e or m.d_in != d:
                raise ShapeError(f"router {i} has shape ({m.d_out},{m.d_in}), expected ({e},{d})")
        if self.task_weights is None:
            self.task_weights = np.ones(len(self.maps))
        self.task_weights = np.asarray(self.task_weights, dtype=np.float64)
        if self.task_weights.shape != (len(self.maps),):
            raise ShapeError(
                f"expected {len(self.maps)} task weights, got shape {self.task_weights.shape}"
            )
        if (self.task_weights < 0).any():
            raise ConfigError("task pooling weights must be non-negative")

    @property
    def num_tasks(self) -> int:
        return len(self.maps)

    @property
    def num_experts(self) -> int:
        return self.maps[0].d_out

    @property
    def d_in(self) -> int:
        return self.maps[0].d_in

    def logits(self, hidden: np.ndarray, counter: FlopCounter | None = None) -> np.ndarray:
        """Routing logits for a (B, d_in) batch, shape (T, B, E)."""
        return np.stack([m.apply(hidden, counter) for m in self.maps])


@dataclass(frozen=True)
class RoutingDecision:
    """Expert selection for one instance.

    ``weights`` holds the renormalized per-task mixture (rows sum to 1 and are
    supported exactly on ``active``); ``full_probs`` keeps the dense softmax
    over all experts, which stage-I pooling and utilization statistics need.
    """

    shared: np.ndarray                # (K_s,) sorted expert indices
    adaptive: tuple[np.ndarray, ...]  # per task, (K_a,) sorted
    active: tuple[np.ndarray, ...]    # per task, (K,) sorted
    union: np.ndarray                 # sorted distinct indices across tasks
    weights: np.ndarray               # (T, E)
    full_probs: np.ndarray            # (T, E)

    @property
    def num_tasks(self) -> int:
        return self.weights.shape[0]

    @property
    def num_experts(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class BatchRouting:
    """Vectorized routing decisions for a whole batch (task-major arrays)."""

    shared: np.ndarray       # (B, K_s)
    adaptive: np.ndarray     # (T, B, K_a)
    active: np.ndarray       # (T, B, K), rows sorted
    unions: tuple[np.ndarray, ...]  # per instance, sorted distinct indices
    weights: np.ndarray      # (T, B, E)
    full_probs: np.ndarray   # (T, B, E)

    @property
    def num_tasks(self) -> int:
        return self.weights.shape[0]

    @property
    def batch_size(self) -> int:
        return self.weights.shape[1]

    @property
    def num_experts(self) -> int:
        return self.weights.shape[2]

    @property
    def k_total(self) -> int:
        return self.active.shape[2]

    def instance(self, b: int) -> RoutingDecision:
        return RoutingDecision(
            shared=self.shared[b].copy(),
            adaptive=tuple(self.adaptive[t, b].copy() for t in range(self.num_tasks)),
            active=tuple(self.active[t, b].copy() for t in range(self.num_tasks)),
            union=self.unions[b].copy(),
            weights=self.weights[:, b, :].copy(),
            full_probs=self.full_probs[:, b, :].copy(),
        )


def stack_decisions(decisions: list[RoutingDecision]) -> BatchRouting:
    """Assemble per-instance decisions into batch-major arrays."""
    if not decisions:
        raise ShapeError("cannot stack an empty decision list")
    t = decisions[0].num_tasks
    return BatchRouting(
        shared=np.stack([d.shared for d in decisions]),
        adaptive=np.stack([np.stack([d.adaptive[i] for d in decisions]) for i in range(t)]),
        active=np.stack([np.stack([d.active[i] for d in decisions]) for i in range(t)]),
        unions=tuple(d.union for d in decisions),
        weights=np.stack([d.weights for d in decisions], axis=1),
        full_probs=np.stack([d.full_probs for d in decisions], axis=1),
    )


def _top_k_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k indices, ties to the lowest index, rows sorted ascending."""
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def renormalized_weights(logits: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Mixture weights for one task row: softmax of ``logits[active]`` scattered
    back into a length-E vector that is exactly zero off the active set."""
    logits = np.asarray(logits, dtype=np.float64)
    active = np.asarray(active, dtype=np.intp)
    sel = logits[active]
    sel = sel - sel.max()
    e = np.exp(sel)
    out = np.zeros_like(logits)
    out[active] = e / e.sum()
    return out


def _renormalized_weights_batch(task_logits: np.ndarray, active: np.ndarray) -> np.ndarray:
    """(T, B, E) weights from (T, B, E) logits and (T, B, K) active sets."""
    sel = np.take_along_axis(task_logits, active, axis=2)
    sel = sel - sel.max(axis=2, keepdims=True)
    e = np.exp(sel)
    w = e / e.sum(axis=2, keepdims=True)
    out = np.zeros_like(task_logits)
    np.put_along_axis(out, active, w, axis=2)
    return out


def compute_global_scores(
    full_probs: np.ndarray, task_weights: np.ndarray | None = None
) -> np.ndarray:
    """Pool per-task gate probabilities into one score per expert.

    ``s_e`` is the task-weight-weighted sum of each task's probability for
    expert e; with unit weights the scores sum to the task count.
    """
    p = np.asarray(full_probs, dtype=np.float64)
    if p.ndim != 2:
        raise ShapeError(f"expected (T, E) probabilities, got shape {p.shape}")
    w = np.ones(p.shape[0]) if task_weights is None else np.asarray(task_weights, dtype=np.float64)
    if w.shape != (p.shape[0],):
        raise ShapeError(f"expected {p.shape[0]} task weights, got shape {w.shape}")
    if (w < 0).any():
        raise NumericsError("task weights must be non-negative")
    if (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
        raise NumericsError("each task's probabilities must lie on the simplex")
    return w @ p


def route_batch(
    task_logits: np.ndarray,
    budget: RoutingBudget,
    task_weights: np.ndarray | None = None,
    full_probs: np.ndarray | None = None,
) -> BatchRouting:
    """Two-stage routing over a batch of logits, shape (T, B, E).

    Stage I ranks experts by pooled dense gate probabilities and fixes the
    shared set per instance; stage II ranks each task's raw logits on the
    complement of the shared set. Mixture weights renormalize over each
    task's active set only.
    """
    z = np.asarray(task_logits, dtype=np.float64)
    if z.ndim != 3:
        raise ShapeError(f"expected (T, B, E) logits, got shape {z.shape}")
    if z.size and not np.isfinite(z).all():
        raise NumericsError("routing logits must be finite")
    t, b, e = z.shape
    budget.validate(e)
    w = np.ones(t) if task_weights is None else np.asarray(task_weights, dtype=np.float64)
    probs = softmax(z, axis=2) if full_probs is None else np.asarray(full_probs, dtype=np.float64)
    if probs.shape != z.shape:
        raise ShapeError(f"full_probs shape {probs.shape} does not match logits {z.shape}")

    pooled = np.einsum("t,tbe->be", w, probs)
    shared = _top_k_rows(pooled, budget.k_shared)

    if budget.k_shared > 0:
        masked = z.copy()
        masked[:, np.arange(b)[:, None], shared] = -np.inf
    else:
        masked = z
    adaptive = _top_k_rows(masked, budget.k_adaptive)

    shared_t = np.broadcast_to(shared, (t, b, budget.k_shared))
    active = np.sort(np.concatenate([shared_t, adaptive], axis=2), axis=2)
    unions = tuple(np.unique(active[:, i, :]) for i in range(b))
    weights = _renormalized_weights_batch(z, active)
    return BatchRouting(
        shared=shared,
        adaptive=adaptive,
        active=active,
        unions=unions,
        weights=weights,
        full_probs=probs,
    )


def naive_route_batch(task_logits: np.ndarray, k: int) -> BatchRouting:
    """Independent per-task top-k routing (no shared stage), shape (T, B, E).

    This is the baseline whose union of active experts can blow up to
    min(E, T*k); it is kept as a separate code path so the two routing modes
    can be compared as genuinely distinct implementations.
    """
    z = np.asarray(task_logits, dtype=np.float64)
    if z.ndim != 3:
        raise ShapeError(f"expected (T, B, E) logits, got shape {z.shape}")
    if z.size and not np.isfinite(z).all():
        raise NumericsError("routing logits must be finite")
    t, b, e = z.shape
    if not 1 <= k <= e:
        raise ConfigError(f"k={k} out of range for {e} experts")
    active = _top_k_rows(z, k)
    unions = tuple(np.unique(active[:, i, :]) for i in range(b))
    weights = _renormalized_weights_batch(z, active)
    return BatchRouting(
        shared=np.zeros((b, 0), dtype=np.intp),
        adaptive=active,
        active=active,
        unions=unions,
        weights=weights,
        full_probs=softmax(z, axis=2),
    )


def progressive_route(
    task_logits: np.ndarray,
    budget: RoutingBudget,
    task_weights: np.ndarray | None = None,
    full_probs: np.ndarray | None = None,
) -> RoutingDecision:
    """Two-stage routing for a single instance; logits shape (T, E)."""
    z = np.asarray(task_logits, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f"expected (T, E) logits, got shape {z.shape}")
    p = None if full_probs is None else np.asarray(full_probs, dtype=np.float64)[:, None, :]
    return route_batch(z[:, None, :], budget, task_weights, p).instance(0)


def naive_sparse_route(task_logits: np.ndarray, k: int) -> RoutingDecision:
    """Independent per-task top-k routing for a single instance, (T, E) logits."""
    z = np.asarray(task_logits, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f"expected (T, E) logits, got shape {z.shape}")
    return naive_route_batch(z[:, None, :], k).instance(0)


def dense_routing(full_probs: np.ndarray) -> BatchRouting:
    """Routing-shaped view of dense gating: every expert active for every task.

    Lets the dense baseline share utilization statistics and loss plumbing
    with the sparse path; with all experts selected the load regularizer is
    identically 1 and contributes zero gradient.
    """
    p = np.asarray(full_probs, dtype=np.float64)
    if p.ndim != 3:
        raise ShapeError(f"expected (T, B, E) probabilities, got shape {p.shape}")
    t, b, e = p.shape
    all_idx = np.arange(e, dtype=np.intp)
    return BatchRouting(
        shared=np.broadcast_to(all_idx, (b, e)).copy(),
        adaptive=np.zeros((t, b, 0), dtype=np.intp),
        active=np.broadcast_to(all_idx, (t, b, e)).copy(),
        unions=tuple(all_idx.copy() for _ in range(b)),
        weights=p,
        full_probs=p,
    )
