"""Deduplicated expert execution over packed row batches.

Each instance's union of selected experts contributes one packed row per
(instance, expert) pair, laid out expert-major: all rows for expert 0 first,
then expert 1, and so on, with instances ascending inside each segment. Every
expert then transforms its contiguous segment with a single matrix product,
and per-task representations are rebuilt by translating (instance, expert)
pairs through the back-map. Memory stays O(total packed rows): the back-map
is a sorted key array, not a dense (batch x experts) table.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError, StateError
from .experts import ExpertPool
from .linalg import FlopCounter, matmul
from .routing import BatchRouting, RoutingDecision, stack_decisions

__all__ = [
    "ExecutionPlan",
    "build_execution_plan",
    "grouped_gemm",
    "reconstruct_task_reps",
]


@dataclass(frozen=True)
class ExecutionPlan:
    """Packing layout for one batch of deduplicated expert work.

    ``row_keys`` holds expert*batch_size + instance for every packed row and
    is strictly increasing, so the back-map is a binary search rather than a
    dense table.
    """

    num_experts: int
    batch_size: int
    loads: np.ndarray             # (E,) rows per expert
    total_rows: int               # sum of loads
    segment_offsets: np.ndarray   # (E+1,) prefix sums of loads
    gather_instances: np.ndarray  # (total_rows,) instance index per packed row
    gather_experts: np.ndarray    # (total_rows,) expert index per packed row
    row_keys: np.ndarray          # (total_rows,) expert*batch_size + instance

    def row_index(self, instance: int, expert: int) -> int:
        """Back-map: packed row index for one (instance, expert) activation."""
        key = expert * self.batch_size + instance
        pos = int(np.searchsorted(self.row_keys, key))
        if pos >= self.total_rows or self.row_keys[pos] != key:
            raise StateError(
                f"no packed row for instance {instance}, expert {expert}: "
                "plan and routing decision are inconsistent"
            )
        return pos

    def row_lookup(self, instances: np.ndarray, experts: np.ndarray) -> np.ndarray:
        """Vectorized back-map; raises if any pair was never packed."""
        inst = np.asarray(instances, dtype=np.int64)
        expt = np.asarray(experts, dtype=np.int64)
        keys = expt * self.batch_size + inst
        if self.total_rows == 0:
            if keys.size:
                raise StateError("plan holds no packed rows but lookups were requested")
            return np.zeros(keys.shape, dtype=np.intp)
        pos = np.searchsorted(self.row_keys, keys)
        ok = (pos < self.total_rows) & (
            self.row_keys[np.minimum(pos, self.total_rows - 1)] == keys
        )
        if not np.all(ok):
            bad = tuple(np.argwhere(~ok)[0])
            b = int(np.broadcast_to(inst, keys.shape)[bad])
            e = int(np.broadcast_to(expt, keys.shape)[bad])
            raise StateError(
                f"no packed row for instance {b}, expert {e}: "
                "plan and routing decision are inconsistent"
            )
        return pos


def build_execution_plan(
    unions: Sequence[np.ndarray], num_experts: int
) -> ExecutionPlan:
    """Traffic calculation plus gather ordering for a batch of expert unions.

    ``loads[e]`` counts the instances whose union contains expert e; packed
    rows are expert-major with instances ascending inside each segment.
    """
    batch_size = len(unions)
    parts_e: list[np.ndarray] = []
    parts_b: list[np.ndarray] = []
    for b, union in enumerate(unions):
        u = np.asarray(union, dtype=np.int64).ravel()
        if u.size and (u.min() < 0 or u.max() >= num_experts):
            raise ShapeError(
                f"instance {b} union contains expert index outside [0, {num_experts})"
            )
        if np.unique(u).size != u.size:
            raise ShapeError(f"instance {b} union contains duplicate expert indices")
        parts_e.append(u)
        parts_b.append(np.full(u.size, b, dtype=np.int64))
    e_all = np.concatenate(parts_e) if parts_e else np.zeros(0, dtype=np.int64)
    b_all = np.concatenate(parts_b) if parts_b else np.zeros(0, dtype=np.int64)

    loads = np.bincount(e_all, minlength=num_experts)
    order = np.lexsort((b_all, e_all))
    gather_e = e_all[order]
    gather_b = b_all[order]
    offsets = np.concatenate([[0], np.cumsum(loads)])
    return ExecutionPlan(
        num_experts=num_experts,
        batch_size=batch_size,
        loads=loads,
        total_rows=int(e_all.size),
        segment_offsets=offsets,
        gather_instances=gather_b,
        gather_experts=gather_e,
        row_keys=gather_e * batch_size + gather_b,
    )


def grouped_gemm(
    packed_in: np.ndarray,
    pool: ExpertPool,
    plan: ExecutionPlan,
    counter: FlopCounter | None = None,
    return_preactivation: bool = False,
) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
    """Apply each expert to its contiguous segment of the packed input.

    Bias and the pool nonlinearity are applied inside the segment transform.
    Adds total_rows * d_in * d_out multiply-adds to the counter.
    """
    x = np.asarray(packed_in, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != plan.total_rows:
        raise ShapeError(
            f"packed input has shape {x.shape}, plan expects {plan.total_rows} rows"
        )
    if x.shape[0] and x.shape[1] != pool.d_in:
        raise ShapeError(f"packed input width {x.shape[1]} != expert d_in {pool.d_in}")
    if pool.num_experts != plan.num_experts:
        raise ShapeError(
            f"pool has {pool.num_experts} experts, plan was built for {plan.num_experts}"
        )
    pre = np.empty((plan.total_rows, pool.d_out))
    for e, layer in enumerate(pool.layers):
        lo, hi = plan.segment_offsets[e], plan.segment_offsets[e + 1]
        if lo == hi:
            continue
        pre[lo:hi] = matmul(x[lo:hi], layer.weight.T, counter) + layer.bias
    out = pool.activate(pre)
    if return_preactivation:
        return out, pre
    return out


def reconstruct_task_reps(
    packed_out: np.ndarray,
    plan: ExecutionPlan,
    routing: BatchRouting | list[RoutingDecision],
) -> np.ndarray:
    """Per-task representations (T, B, d_out) from packed expert outputs.

    Each task mixes the packed rows of its active experts with its
    renormalized weights; rows shared across tasks are read, never recomputed.
    """
    if isinstance(routing, list):
        routing = stack_decisions(routing)
    o = np.asarray(packed_out, dtype=np.float64)
    if o.ndim != 2 or o.shape[0] != plan.total_rows:
        raise ShapeError(
            f"packed output has shape {o.shape}, plan expects {plan.total_rows} rows"
        )
    if routing.batch_size != plan.batch_size:
        raise ShapeError(
            f"routing covers {routing.batch_size} instances, plan {plan.batch_size}"
        )
    t, b = routing.num_tasks, routing.batch_size
    b_grid = np.broadcast_to(np.arange(b)[:, None], routing.active.shape[1:])
    reps = np.zeros((t, b, o.shape[1]))
    if b == 0:
        return reps
    for ti in range(t):
        rows = plan.row_lookup(b_grid, routing.active[ti])
        w_sel = np.take_along_axis(routing.weights[ti], routing.active[ti], axis=1)
        reps[ti] = np.einsum("bk,bkd->bd", w_sel, o[rows])
    return reps
