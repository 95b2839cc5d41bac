"""Exception types shared across the package."""


class TaskMoeError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(TaskMoeError):
    """Operands have incompatible or invalid shapes."""


class NumericsError(TaskMoeError):
    """A numeric invariant was violated (NaN/Inf, invalid probability)."""


class ConfigError(TaskMoeError):
    """Invalid configuration value or combination; maps to CLI exit code 1."""


class DataFormatError(TaskMoeError):
    """Malformed data file; message names the offending line and field."""


class CalibrationError(TaskMoeError):
    """Synthetic-label calibration could not hit a requested positive rate."""


class MetricError(TaskMoeError):
    """Metric undefined for the given inputs (e.g. single-class AUC)."""


class StateError(TaskMoeError):
    """Operation requires state that is missing or inconsistent."""


class PoolError(TaskMoeError):
    """Invalid workspace-pool operation (infeasible request, double release)."""


class PoolTimeout(TaskMoeError):
    """An allocation deadline expired before pages became available."""


class TrainingDiverged(TaskMoeError):
    """Loss became non-finite during training; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict | None = None) -> None:
        super().__init__(message)
        self.snapshot = snapshot or {}
