"""Sparse multi-task mixture-of-experts at desk scale.

The library covers the full pipeline: per-task routers with a two-stage
(shared + task-adaptive) expert selection that bounds how many distinct
experts any instance executes, deduplicated grouped execution over packed
expert segments, a cross-task load-balancing regularizer, hand-derived
training with gradient checks, ranking metrics, a synthetic multi-task log
generator, and a profiled page-pool workspace allocator. A benchmark CLI
(``taskmoe``) ties the pieces together.
"""

from .balance import LoadStats, SkewDiagnostics, compute_load_stats, lb_loss_gradient, skew_diagnostics
from .checkpoint import load_model, save_model
from .data import InteractionLog, SynthSpec, generate, read_log, write_log
from .errors import (
    CalibrationError,
    ConfigError,
    DataFormatError,
    MetricError,
    NumericsError,
    PoolError,
    PoolTimeout,
    ShapeError,
    StateError,
    TaskMoeError,
    TrainingDiverged,
)
from .execution import ExecutionPlan, build_execution_plan, grouped_gemm, reconstruct_task_reps
from .experts import ExpertPool, init_expert_pool
from .linalg import Affine, FlopCounter, init_affine, matmul, relu, sigmoid, softmax, top_k
from .metrics import auc, gauc
from .model import (
    ForwardResult,
    MoeModel,
    dense_mmoe_forward,
    forward_dense,
    forward_sparse,
    init_model,
)
from .routing import (
    BatchRouting,
    RouterBank,
    RoutingBudget,
    RoutingDecision,
    compute_global_scores,
    dense_routing,
    naive_route_batch,
    naive_sparse_route,
    progressive_route,
    renormalized_weights,
    route_batch,
    stack_decisions,
)
from .training import (
    AdamOptimizer,
    BackwardResult,
    EpochMetrics,
    GradCheckReport,
    SgdOptimizer,
    TrainConfig,
    TrainResult,
    backward,
    build_model,
    evaluate,
    grad_check,
    make_optimizer,
    task_loss,
    total_loss,
    train,
    train_step,
)
from .workspace import (
    LoadProfile,
    PageBlock,
    ReplayResult,
    WorkspacePool,
    provision,
    required_pages,
    simulate_replay,
)

__version__ = "0.1.0"
