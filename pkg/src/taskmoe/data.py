"""Synthetic multi-task interaction logs and the tabular on-disk format.

A log is a flat table of (user id, feature vector, one binary label per
task). The generator draws features from a seeded latent-factor model and
thresholds noisy linear scores per task, calibrating each threshold on the
empirical score distribution so the requested positive rates are hit; tasks
share a configurable latent direction so cross-task transfer exists, and a
per-user latent offset gives the per-user label structure that grouped
metrics need.

On disk a log is tab-separated text with one header line::

    user_id<TAB>f_0 .. f_{d-1}<TAB><task name per label column>

Reals are serialized with 9 significant digits; generated features are
quantized through the same formatting, so write-then-read reproduces a
generated log exactly.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, ConfigError, DataFormatError, ShapeError

__all__ = ["InteractionLog", "SynthSpec", "generate", "read_log", "write_log"]

REAL_FORMAT = "%.9g"


@dataclass(eq=False)
class InteractionLog:
    """Interaction records: one feature vector and T binary labels per row."""

    user_ids: list[str]
    features: np.ndarray   # (N, d) float64
    labels: np.ndarray     # (N, T) int64 in {0, 1}
    task_names: list[str]

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.user_ids)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ShapeError(f"features shape {self.features.shape} for {n} user ids")
        if self.labels.ndim != 2 or self.labels.shape[0] != n:
            raise ShapeError(f"labels shape {self.labels.shape} for {n} user ids")
        if self.labels.shape[1] != len(self.task_names):
            raise ShapeError(
                f"{self.labels.shape[1]} label columns for {len(self.task_names)} task names"
            )
        if self.labels.size and not np.isin(self.labels, (0, 1)).all():
            raise ShapeError("labels must be 0 or 1")
        if n and any(not u for u in self.user_ids):
            raise ShapeError("user ids must be non-empty strings")

    @property
    def num_records(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_tasks(self) -> int:
        return self.labels.shape[1]

    def positive_rates(self) -> np.ndarray:
        return self.labels.mean(axis=0)

    def subset(self, indices: np.ndarray) -> "InteractionLog":
        idx = np.asarray(indices, dtype=np.intp)
        return InteractionLog(
            user_ids=[self.user_ids[i] for i in idx],
            features=self.features[idx],
            labels=self.labels[idx],
            task_names=list(self.task_names),
        )

    def equals(self, other: "InteractionLog") -> bool:
        return (
            self.user_ids == other.user_ids
            and self.task_names == other.task_names
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings; the seed fixes every draw."""

    num_users: int
    records_per_user: int
    num_features: int
    positive_rates: tuple[float, ...]
    signal_strength: float | tuple[float, ...] = 3.0
    task_correlation: float = 0.5   # 0: orthogonal task directions, 1: fully shared
    seed: int = 0
    feature_noise: float = 0.25
    label_noise: float = 1.0
    user_spread: float = 0.5
    latent_dim: int | None = None

    def validate(self) -> None:
        if self.num_users <= 0 or self.records_per_user <= 0:
            raise ConfigError("key 'num_users'/'records_per_user': must be positive")
        if self.num_features <= 0:
            raise ConfigError(f"key 'num_features': must be positive, got {self.num_features}")
        if not self.positive_rates:
            raise ConfigError("key 'positive_rates': need at least one task")
        for i, rho in enumerate(self.positive_rates):
            if not 0.0 < rho < 1.0:
                raise ConfigError(
                    f"key 'positive_rates': entry {i} must be in (0, 1), got {rho}"
                )
        if not 0.0 <= self.task_correlation <= 1.0:
            raise ConfigError(
                f"key 'task_correlation': must be in [0, 1], got {self.task_correlation}"
            )
        strengths = self.signal_strengths()
        if (strengths <= 0).any():
            raise ConfigError("key 'signal_strength': must be positive")
        if self.feature_noise < 0 or self.label_noise < 0 or self.user_spread < 0:
            raise ConfigError("noise and spread settings must be non-negative")

    @property
    def num_tasks(self) -> int:
        return len(self.positive_rates)

    def signal_strengths(self) -> np.ndarray:
        s = self.signal_strength
        if np.isscalar(s):
            return np.full(self.num_tasks, float(s))
        arr = np.asarray(s, dtype=np.float64)
        if arr.shape != (self.num_tasks,):
            raise ConfigError(
                f"key 'signal_strength': expected scalar or {self.num_tasks} values"
            )
        return arr


def _quantize(values: np.ndarray) -> np.ndarray:
    """Round-trip through the serialization format (9 significant digits)."""
    return np.char.mod(REAL_FORMAT, values).astype(np.float64)


def generate(spec: SynthSpec) -> InteractionLog:
    """Seeded latent-factor log with calibrated per-task positive rates.

    Label thresholds are placed at the empirical (1 - rate) quantile of each
    task's score sample; the achieved rate must land within 10% relative of
    the target or generation fails (too few records for the requested rate).
    """
    spec.validate()
    t_n = spec.num_tasks
    d = spec.num_features
    if d < t_n + 1:
        raise ConfigError(
            f"key 'num_features': need at least {t_n + 1} features for {t_n} "
            "orthogonalizable task directions"
        )
    r = spec.latent_dim if spec.latent_dim is not None else min(d, max(t_n + 1, 8))
    if not t_n + 1 <= r <= d:
        raise ConfigError(f"key 'latent_dim': must lie in [{t_n + 1}, {d}], got {r}")
    rng = np.random.default_rng(spec.seed)
    n = spec.num_users * spec.records_per_user

    loading, _ = np.linalg.qr(rng.standard_normal((d, r)))          # orthonormal columns
    directions, _ = np.linalg.qr(rng.standard_normal((r, t_n + 1)))  # shared + per-task
    shared_dir = directions[:, 0]
    c = spec.task_correlation
    mix_norm = math.sqrt(c * c + (1.0 - c) * (1.0 - c))
    task_dirs = (c * shared_dir[:, None] + (1.0 - c) * directions[:, 1:]) / mix_norm

    user_centers = spec.user_spread * rng.standard_normal((spec.num_users, r))
    user_index = np.repeat(np.arange(spec.num_users), spec.records_per_user)
    latent = user_centers[user_index] + rng.standard_normal((n, r))
    features = latent @ loading.T + spec.feature_noise * rng.standard_normal((n, d))
    features = _quantize(features)

    strengths = spec.signal_strengths()
    labels = np.empty((n, t_n), dtype=np.int64)
    for t in range(t_n):
        scores = strengths[t] * (latent @ task_dirs[:, t])
        scores = scores + spec.label_noise * rng.standard_normal(n)
        rho = spec.positive_rates[t]
        cut = min(n - 1, max(0, math.ceil((1.0 - rho) * n) - 1))
        threshold = np.sort(scores)[cut]
        y = scores > threshold
        achieved = y.mean()
        if abs(achieved - rho) > 0.1 * rho:
            raise CalibrationError(
                f"task {t}: achieved positive rate {achieved:.5f} misses target {rho} "
                f"by more than 10% relative; increase the record count"
            )
        labels[:, t] = y
    user_ids = [f"u{u:05d}" for u in user_index]
    task_names = [f"y_{t}" for t in range(t_n)]
    return InteractionLog(
        user_ids=user_ids, features=features, labels=labels, task_names=task_names
    )


def write_log(log: InteractionLog, path: str) -> None:
    """Write the tab-separated format atomically (temp file, then rename)."""
    header = ["user_id"] + [f"f_{i}" for i in range(log.num_features)] + list(log.task_names)
    lines = ["\t".join(header)]
    for i in range(log.num_records):
        fields = [log.user_ids[i]]
        fields += [REAL_FORMAT % v for v in log.features[i]]
        fields += [str(int(v)) for v in log.labels[i]]
        lines.append("\t".join(fields))
    payload = "\n".join(lines) + "\n"
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_log_")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_log(path: str) -> InteractionLog:
    """Parse the tab-separated format; errors name the line and field."""
    with open(path, "r", encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty file, expected a header line")
    header = lines[0].split("\t")
    if header[0] != "user_id":
        raise DataFormatError(f"{path}: line 1: header must start with 'user_id'")
    d = 0
    while 1 + d < len(header) and header[1 + d] == f"f_{d}":
        d += 1
    task_names = header[1 + d :]
    t_n = len(task_names)
    expected = 1 + d + t_n
    user_ids: list[str] = []
    features = np.empty((len(lines) - 1, d))
    labels = np.empty((len(lines) - 1, t_n), dtype=np.int64)
    for row, line in enumerate(lines[1:]):
        lineno = row + 2
        fields = line.split("\t")
        if len(fields) != expected:
            raise DataFormatError(
                f"{path}: line {lineno}: expected {expected} fields, got {len(fields)}"
            )
        if not fields[0]:
            raise DataFormatError(f"{path}: line {lineno}: field 'user_id' is empty")
        user_ids.append(fields[0])
        for j in range(d):
            try:
                features[row, j] = float(fields[1 + j])
            except ValueError:
                raise DataFormatError(
                    f"{path}: line {lineno}: field 'f_{j}': invalid real '{fields[1 + j]}'"
                ) from None
        for j in range(t_n):
            value = fields[1 + d + j]
            if value not in ("0", "1"):
                raise DataFormatError(
                    f"{path}: line {lineno}: field '{task_names[j]}': "
                    f"label must be 0 or 1, got '{value}'"
                )
            labels[row, j] = int(value)
    return InteractionLog(
        user_ids=user_ids, features=features, labels=labels, task_names=task_names
    )
