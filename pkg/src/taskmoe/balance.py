"""Batch-level expert-utilization statistics and the load regularizer.

The regularizer couples two aggregates taken over every (instance, task)
router decision in a mini-batch: the selection frequency of each expert and
the mean routing weight it receives. Their product, scaled by E/K, equals 1
under perfectly uniform utilization and grows as traffic and preference
concentrate on the same experts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StateError
from .routing import BatchRouting

__all__ = [
    "LoadStats",
    "SkewDiagnostics",
    "compute_load_stats",
    "lb_loss_gradient",
    "skew_diagnostics",
]


@dataclass(frozen=True)
class LoadStats:
    """Aggregated utilization for one mini-batch.

    ``frequency`` sums to the per-task budget K, ``mass`` to 1; ``counts``
    are the raw per-expert selection totals (batch_size * num_tasks *
    frequency, exactly).
    """

    frequency: np.ndarray    # (E,) selection frequency per expert
    mass: np.ndarray         # (E,) mean routing weight per expert
    value: float             # (E/K) * sum_e frequency * mass
    counts: np.ndarray       # (E,) integer selection counts
    batch_size: int
    num_tasks: int
    k_budget: int
    from_dense_probs: bool


@dataclass(frozen=True)
class SkewDiagnostics:
    cv: float                # coefficient of variation of counts
    max_mean_ratio: float    # max count over mean count
    dead_fraction: float     # fraction of experts with zero traffic


def compute_load_stats(routing: BatchRouting, dense_probs: bool = False) -> LoadStats:
    """Selection frequency, probability mass, and regularizer value for a batch.

    ``dense_probs`` switches the mass aggregate from the sparse renormalized
    weights (default: zero mass off each task's active set, masses sum to 1)
    to the dense gate softmax; the sparse reading is the one the training
    objective uses.
    """
    b, t, e = routing.batch_size, routing.num_tasks, routing.num_experts
    if b == 0 or t == 0:
        raise StateError("load statistics are undefined for an empty batch")
    counts = np.bincount(routing.active.ravel(), minlength=e)
    frequency = counts / (b * t)
    probs = routing.full_probs if dense_probs else routing.weights
    mass = probs.sum(axis=(0, 1)) / (b * t)
    k = routing.k_total
    value = float((e / k) * np.dot(frequency, mass))
    return LoadStats(
        frequency=frequency,
        mass=mass,
        value=value,
        counts=counts,
        batch_size=b,
        num_tasks=t,
        k_budget=k,
        from_dense_probs=dense_probs,
    )


def lb_loss_gradient(stats: LoadStats, routing: BatchRouting) -> np.ndarray:
    """Gradient of the regularizer w.r.t. router logits, shape (T, B, E).

    Selection frequencies are treated as constants (selection itself is not
    differentiable); the gradient flows through the mass term via the softmax
    that produced the weights. For the sparse reading it is therefore exactly
    zero on every unselected (task, expert) pair.
    """
    b, t, e = routing.batch_size, routing.num_tasks, routing.num_experts
    if (stats.batch_size, stats.num_tasks) != (b, t) or stats.frequency.shape != (e,):
        raise StateError("load stats were computed for a different batch")
    if stats.k_budget != routing.k_total:
        raise StateError("load stats were computed under a different budget")
    probs = routing.full_probs if stats.from_dense_probs else routing.weights
    coef = e / (stats.k_budget * b * t)
    inner = np.einsum("tbe,e->tb", probs, stats.frequency)
    return coef * probs * (stats.frequency[None, None, :] - inner[:, :, None])


def skew_diagnostics(stats: LoadStats) -> SkewDiagnostics:
    """Descriptive concentration measures over the raw selection counts."""
    c = stats.counts.astype(np.float64)
    mean = c.mean()
    if mean == 0:
        return SkewDiagnostics(cv=0.0, max_mean_ratio=0.0, dead_fraction=1.0)
    return SkewDiagnostics(
        cv=float(c.std() / mean),
        max_mean_ratio=float(c.max() / mean),
        dead_fraction=float((c == 0).mean()),
    )
