"""Benchmark harness: generate, train, bench, pathology, profile-workspace.

Configuration comes from a flat ``key = value`` file plus a few command-line
overrides (--seed, --out, --data, --workers). Every command with a fixed seed
produces byte-identical output files across runs; wall-clock timing is
therefore opt-in (``timing_repeats``) and all other outputs contain no
machine-dependent values. Output files are written atomically.

Exit codes: 0 success, 1 validation error (bad flags, config keys or values),
2 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .balance import compute_load_stats
from .checkpoint import save_model
from .config import ConfigMap, parse_config
from .data import InteractionLog, SynthSpec, generate, read_log, write_log
from .errors import ConfigError, TaskMoeError
from .linalg import FlopCounter
from .metrics import auc, gauc
from .model import forward_dense, forward_sparse
from .routing import RoutingBudget, naive_route_batch, route_batch
from .training import TrainConfig, build_model, train
from .workspace import LoadProfile, provision, required_pages, simulate_replay

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit(2); we map usage errors to 1
        raise ConfigError(f"argument error: {message}")


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float):
        return "%.12g" % value
    return str(value)


def _write_rows_atomic(path: str, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    payload = "\n".join(lines) + "\n"
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(payload)
    os.replace(tmp, path)


def _synth_spec(cfg: ConfigMap, seed: int) -> SynthSpec:
    return SynthSpec(
        num_users=cfg.get_int("num_users", 200),
        records_per_user=cfg.get_int("records_per_user", 25),
        num_features=cfg.get_int("num_features", 24),
        positive_rates=cfg.get_floats("positive_rates"),
        signal_strength=cfg.get_float("signal_strength", 3.0),
        task_correlation=cfg.get_float("task_correlation", 0.5),
        seed=seed,
        feature_noise=cfg.get_float("feature_noise", 0.25),
        label_noise=cfg.get_float("label_noise", 1.0),
        user_spread=cfg.get_float("user_spread", 0.5),
        latent_dim=cfg.get_int("latent_dim", None),
    )


_GENERATE_KEYS = {
    "out",
    "seed",
    "num_users",
    "records_per_user",
    "num_features",
    "positive_rates",
    "signal_strength",
    "task_correlation",
    "feature_noise",
    "label_noise",
    "user_spread",
    "latent_dim",
}


def cmd_generate(args) -> int:
    cfg = parse_config(args.config)
    cfg.restrict(_GENERATE_KEYS)
    seed = args.seed if args.seed is not None else cfg.get_int("seed", 0)
    out = args.out if args.out is not None else cfg.get_str("out")
    spec = _synth_spec(cfg, seed)
    log = generate(spec)
    write_log(log, out)
    rates = ",".join("%.4f" % r for r in log.positive_rates())
    print(f"wrote {log.num_records} records x {log.num_tasks} tasks to {out} (rates {rates})")
    return 0


_TRAIN_KEYS = {
    "data",
    "out",
    "seed",
    "valid_fraction",
    "num_experts",
    "k_shared",
    "k_adaptive",
    "d_hidden",
    "d_in",
    "d_out",
    "learning_rate",
    "batch_size",
    "epochs",
    "optimizer",
    "lb_strength",
    "mode",
    "expert_nonlinearity",
    "encoder_nonlinearity",
    "task_loss_weights",
    "router_task_weights",
    "dense_probs_in_stats",
}


def _train_config(cfg: ConfigMap, seed: int) -> TrainConfig:
    config = TrainConfig(
        num_experts=cfg.get_int("num_experts", 8),
        k_shared=cfg.get_int("k_shared", 1),
        k_adaptive=cfg.get_int("k_adaptive", 1),
        d_hidden=cfg.get_int("d_hidden", 32),
        d_in=cfg.get_int("d_in", 32),
        d_out=cfg.get_int("d_out", 16),
        learning_rate=cfg.get_float("learning_rate", 0.1),
        batch_size=cfg.get_int("batch_size", 64),
        epochs=cfg.get_int("epochs", 10),
        seed=seed,
        optimizer=cfg.get_str("optimizer", "sgd"),
        lb_strength=cfg.get_float("lb_strength", 0.01),
        mode=cfg.get_str("mode", "sparse"),
        expert_nonlinearity=cfg.get_str("expert_nonlinearity", "relu"),
        encoder_nonlinearity=cfg.get_str("encoder_nonlinearity", "relu"),
        task_loss_weights=cfg.get_floats("task_loss_weights", None),
        router_task_weights=cfg.get_floats("router_task_weights", None),
        dense_probs_in_stats=cfg.get_bool("dense_probs_in_stats", False),
    )
    config.validate()
    return config


def _metrics_rows(epochs, task_names) -> tuple[list[str], list[list]]:
    header = ["epoch", "task_loss", "lb_loss", "total_loss"]
    header += [f"auc_{name}" for name in task_names]
    header += [f"gauc_{name}" for name in task_names]
    header += ["load_cv", "load_max_mean", "dead_fraction"]
    rows = []
    for em in epochs:
        row: list = [em.epoch, em.task_value, em.lb_value, em.total]
        row += list(em.aucs)
        row += list(em.gaucs)
        row += [em.load_cv, em.load_max_mean, em.dead_fraction]
        rows.append(row)
    return header, rows


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    cfg.restrict(_TRAIN_KEYS)
    seed = args.seed if args.seed is not None else cfg.get_int("seed", 0)
    data_path = args.data if args.data is not None else cfg.get_str("data")
    out_dir = args.out if args.out is not None else cfg.get_str("out")
    if not os.path.exists(data_path):
        raise TaskMoeError(f"data file not found: {data_path}")
    log = read_log(data_path)
    config = _train_config(cfg, seed)
    valid_fraction = cfg.get_float("valid_fraction", 0.0)
    if not 0.0 <= valid_fraction < 1.0:
        raise ConfigError(f"key 'valid_fraction': must be in [0, 1), got {valid_fraction}")
    valid = None
    train_log = log
    if valid_fraction > 0:
        perm = np.random.default_rng(seed).permutation(log.num_records)
        n_valid = int(round(valid_fraction * log.num_records))
        valid = log.subset(np.sort(perm[:n_valid]))
        train_log = log.subset(np.sort(perm[n_valid:]))
    result = train(train_log, config, valid)
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    metrics_path = os.path.join(out_dir, "metrics.csv")
    save_model(result.model, seed, ckpt_path)
    header, rows = _metrics_rows(result.epochs, log.task_names)
    _write_rows_atomic(metrics_path, header, rows)
    last = result.epochs[-1]
    aucs = ",".join(_fmt(a) for a in last.aucs)
    print(f"trained {config.epochs} epochs on {train_log.num_records} records")
    print(f"final task_loss {_fmt(last.task_value)} lb {_fmt(last.lb_value)} auc {aucs}")
    print(f"wrote {ckpt_path} and {metrics_path}")
    return 0


_BENCH_KEYS = {
    "out",
    "seed",
    "experts_sweep",
    "k_shared",
    "k_adaptive",
    "num_features",
    "d_hidden",
    "d_in",
    "d_out",
    "batch_size",
    "num_batches",
    "positive_rates",
    "signal_strength",
    "task_correlation",
    "records_per_user",
    "timing_repeats",
    "expert_nonlinearity",
}


def _bench_data(cfg: ConfigMap, seed: int, records: int) -> InteractionLog:
    rates = cfg.get_floats("positive_rates", (0.3, 0.1, 0.05, 0.2))
    per_user = cfg.get_int("records_per_user", 20)
    spec = SynthSpec(
        num_users=-(-records // per_user),  # round up so the sweep has enough rows
        records_per_user=per_user,
        num_features=cfg.get_int("num_features", 24),
        positive_rates=rates,
        signal_strength=cfg.get_float("signal_strength", 3.0),
        task_correlation=cfg.get_float("task_correlation", 0.5),
        seed=seed,
    )
    return generate(spec)


def cmd_bench(args) -> int:
    cfg = parse_config(args.config)
    cfg.restrict(_BENCH_KEYS)
    seed = args.seed if args.seed is not None else cfg.get_int("seed", 0)
    out = args.out if args.out is not None else cfg.get_str("out")
    sweep = cfg.get_ints("experts_sweep", (16, 32, 64, 128))
    batch = cfg.get_int("batch_size", 64)
    num_batches = cfg.get_int("num_batches", 4)
    timing_repeats = cfg.get_int("timing_repeats", 0)
    k_shared = cfg.get_int("k_shared", 4)
    k_adaptive = cfg.get_int("k_adaptive", 4)
    log = _bench_data(cfg, seed, batch * num_batches)
    t_n = log.num_tasks
    if log.num_records < batch * num_batches:
        raise ConfigError("key 'records_per_user': generated fewer records than the bench needs")

    header = [
        "mode", "experts", "tasks", "batch_size", "instances", "k_shared", "k_adaptive",
        "params_total", "params_active", "expert_params_total", "expert_params_active",
        "expert_active_ratio", "expert_flops", "total_flops", "flops_per_instance",
        "mean_union", "max_union", "lb_loss", "load_cv", "wall_ms",
    ]
    header += [f"auc_{name}" for name in log.task_names]
    header += [f"gauc_{name}" for name in log.task_names]
    rows: list[list] = []
    for num_experts in sweep:
        for mode in ("dense", "sparse"):
            config = TrainConfig(
                num_experts=num_experts,
                k_shared=k_shared,
                k_adaptive=k_adaptive,
                d_hidden=cfg.get_int("d_hidden", 32),
                d_in=cfg.get_int("d_in", 32),
                d_out=cfg.get_int("d_out", 16),
                seed=seed,
                mode=mode,
                expert_nonlinearity=cfg.get_str("expert_nonlinearity", "relu"),
                batch_size=batch,
            )
            config.validate()
            rows.append(_bench_row(config, log, num_batches, timing_repeats, mode))
    _write_rows_atomic(out, header, rows)
    print(f"wrote {len(rows)} bench rows to {out}")
    return 0


def _bench_row(config: TrainConfig, log: InteractionLog, num_batches: int,
               timing_repeats: int, mode: str) -> list:
    model = build_model(config, log.num_features, log.num_tasks)
    batch = config.batch_size
    counter = FlopCounter()
    expert_flops = 0
    unions: list[int] = []
    counts = np.zeros(config.num_experts, dtype=np.int64)
    lb_values = []
    preds = np.empty((log.num_tasks, num_batches * batch))
    for i in range(num_batches):
        x = log.features[i * batch : (i + 1) * batch]
        if mode == "dense":
            result = forward_dense(x, model, counter, keep_cache=False)
        else:
            result = forward_sparse(x, model, counter, keep_cache=False)
        preds[:, i * batch : (i + 1) * batch] = result.predictions
        expert_flops += result.expert_flops
        unions += [u.size for u in result.routing.unions]
        stats = compute_load_stats(result.routing)
        counts += stats.counts
        lb_values.append(stats.value)
    instances = num_batches * batch
    labels = log.labels[: instances]
    users = log.user_ids[: instances]
    aucs, gaucs = [], []
    for t in range(log.num_tasks):
        try:
            aucs.append(auc(preds[t], labels[:, t]))
        except TaskMoeError:
            aucs.append(float("nan"))
        try:
            gaucs.append(gauc(preds[t], labels[:, t], users))
        except TaskMoeError:
            gaucs.append(float("nan"))

    per_expert = config.d_in * config.d_out + config.d_out
    expert_total = config.num_experts * per_expert
    if mode == "sparse":
        u_max = min(config.num_experts, config.k_shared + log.num_tasks * config.k_adaptive)
    else:
        u_max = config.num_experts
    expert_active = u_max * per_expert
    params_total = model.num_parameters()
    params_active = params_total - expert_total + expert_active

    wall_ms = ""
    if timing_repeats > 0:
        times = []
        for _ in range(timing_repeats + 1):  # first iteration is warmup
            started = time.perf_counter()
            for i in range(num_batches):
                x = log.features[i * batch : (i + 1) * batch]
                if mode == "dense":
                    forward_dense(x, model, keep_cache=False)
                else:
                    forward_sparse(x, model, keep_cache=False)
            times.append((time.perf_counter() - started) * 1000.0)
        wall_ms = _fmt(float(np.median(times[1:])))

    mean_c = counts.mean()
    cv = float(counts.std() / mean_c) if mean_c > 0 else 0.0
    return [
        mode, config.num_experts, log.num_tasks, batch, instances,
        config.k_shared, config.k_adaptive,
        params_total, params_active, expert_total, expert_active,
        expert_active / expert_total, expert_flops, counter.multiply_adds,
        expert_flops / instances,
        float(np.mean(unions)), int(np.max(unions)),
        float(np.mean(lb_values)), cv, wall_ms,
    ] + aucs + gaucs


_PATHOLOGY_KEYS = {
    "out",
    "seed",
    "num_experts",
    "k_shared",
    "k_adaptive",
    "tasks_sweep",
    "trials",
    "batch_size",
    "logit_mode",
}


def _pathology_logits(rng, mode: str, tasks: int, batch: int, experts: int, k: int) -> np.ndarray:
    z = rng.normal(size=(tasks, batch, experts))
    if mode == "adversarial":
        # each task strongly prefers its own contiguous index block
        z *= 0.01
        for t in range(tasks):
            targets = (np.arange(k) + t * k) % experts
            z[t, :, targets] += 10.0
    return z


def cmd_pathology(args) -> int:
    cfg = parse_config(args.config)
    cfg.restrict(_PATHOLOGY_KEYS)
    seed = args.seed if args.seed is not None else cfg.get_int("seed", 0)
    out = args.out if args.out is not None else cfg.get_str("out")
    experts = cfg.get_int("num_experts", 32)
    k_shared = cfg.get_int("k_shared", 2)
    k_adaptive = cfg.get_int("k_adaptive", 2)
    sweep = cfg.get_ints("tasks_sweep", (1, 2, 4, 8))
    trials = cfg.get_int("trials", 50)
    batch = cfg.get_int("batch_size", 8)
    logit_mode = cfg.get_str("logit_mode", "random")
    if logit_mode not in ("random", "adversarial"):
        raise ConfigError(f"key 'logit_mode': expected random or adversarial, got '{logit_mode}'")
    budget = RoutingBudget(k_shared=k_shared, k_adaptive=k_adaptive)
    k = budget.k_total
    budget.validate(experts)

    header = [
        "mode", "tasks", "trials", "batch_size", "mean_union", "max_union",
        "union_bound", "load_cv", "dead_fraction",
    ]
    rows: list[list] = []
    for tasks in sweep:
        rng = np.random.default_rng((seed, tasks))
        stats = {name: {"unions": [], "counts": np.zeros(experts, dtype=np.int64)}
                 for name in ("naive", "progressive")}
        for _ in range(trials):
            z = _pathology_logits(rng, logit_mode, tasks, batch, experts, k)
            for name, routing in (
                ("naive", naive_route_batch(z, k)),
                ("progressive", route_batch(z, budget)),
            ):
                stats[name]["unions"] += [u.size for u in routing.unions]
                stats[name]["counts"] += compute_load_stats(routing).counts
        for name in ("naive", "progressive"):
            unions = np.array(stats[name]["unions"])
            counts = stats[name]["counts"].astype(float)
            bound = min(experts, tasks * k) if name == "naive" else min(
                experts, k_shared + tasks * k_adaptive
            )
            cv = float(counts.std() / counts.mean()) if counts.mean() > 0 else 0.0
            rows.append([
                name, tasks, trials, batch, float(unions.mean()), int(unions.max()),
                bound, cv, float((counts == 0).mean()),
            ])
    _write_rows_atomic(out, header, rows)
    print(f"wrote {len(rows)} pathology rows to {out}")
    return 0


_PROFILE_KEYS = {
    "out",
    "seed",
    "num_experts",
    "k_shared",
    "k_adaptive",
    "num_tasks",
    "num_features",
    "d_hidden",
    "d_in",
    "d_out",
    "batch_size",
    "num_batches",
    "quantiles",
    "page_size",
    "elem_bytes",
    "workers",
}


def cmd_profile_workspace(args) -> int:
    cfg = parse_config(args.config)
    cfg.restrict(_PROFILE_KEYS)
    seed = args.seed if args.seed is not None else cfg.get_int("seed", 0)
    out_dir = args.out if args.out is not None else cfg.get_str("out")
    workers = args.workers if args.workers is not None else cfg.get_int("workers", 4)
    config = TrainConfig(
        num_experts=cfg.get_int("num_experts", 32),
        k_shared=cfg.get_int("k_shared", 2),
        k_adaptive=cfg.get_int("k_adaptive", 2),
        d_hidden=cfg.get_int("d_hidden", 32),
        d_in=cfg.get_int("d_in", 32),
        d_out=cfg.get_int("d_out", 16),
        seed=seed,
        batch_size=cfg.get_int("batch_size", 64),
    )
    config.validate()
    num_features = cfg.get_int("num_features", 24)
    num_batches = cfg.get_int("num_batches", 50)
    if num_batches <= 0:
        raise ConfigError(f"key 'num_batches': must be positive, got {num_batches}")
    quantiles = cfg.get_floats("quantiles", (0.5, 0.9, 0.99, 1.0))
    page_size = cfg.get_int("page_size", 4096)
    elem_bytes = cfg.get_int("elem_bytes", 8)
    tasks = cfg.get_int("num_tasks", 4)

    model = build_model(config, num_features, tasks)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2])
    profile = LoadProfile()
    # batch sizes vary around the configured size so the load distribution
    # has genuine spread to provision against
    sizes = rng.integers(max(1, config.batch_size // 4), config.batch_size + 1, size=num_batches)
    for i in range(num_batches):
        x = rng.standard_normal((int(sizes[i]), num_features))
        result = forward_sparse(x, model, keep_cache=False)
        profile.add(result.plan.total_rows)

    os.makedirs(out_dir, exist_ok=True)
    samples_path = os.path.join(out_dir, "profile_samples.txt")
    profile.save(samples_path)

    requests = [
        required_pages(n, config.d_in, config.d_out, elem_bytes, page_size)
        for n in profile.samples
    ]
    header = ["quantile", "n_act", "block_pages", "capacity_pages", "wait_events", "peak_pages"]
    rows: list[list] = []
    for q in quantiles:
        n_act = profile.quantile(q)
        block = required_pages(n_act, config.d_in, config.d_out, elem_bytes, page_size)
        capacity = provision(profile, q, config.d_in, config.d_out, workers, elem_bytes, page_size)
        replay = simulate_replay(capacity, requests, workers, page_size)
        rows.append([q, n_act, block, capacity, replay.wait_events, replay.peak_pages_in_use])
    report_path = os.path.join(out_dir, "workspace_report.csv")
    _write_rows_atomic(report_path, header, rows)
    print(f"profiled {num_batches} batches; wrote {samples_path} and {report_path}")
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="taskmoe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in (
        ("generate", cmd_generate),
        ("train", cmd_train),
        ("bench", cmd_bench),
        ("pathology", cmd_pathology),
        ("profile-workspace", cmd_profile_workspace),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="flat key = value config file")
        p.add_argument("--data", default=None, help="input log path (overrides config)")
        p.add_argument("--out", default=None, help="output path or directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--workers", type=int, default=None, help="worker count override")
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (TaskMoeError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
