"""Exception types shared across taprec."""

from __future__ import annotations


class TaprecError(Exception):
    """Base class for all taprec errors."""


class ConfigError(TaprecError, ValueError):
    """Invalid configuration value. ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class DimensionError(TaprecError, ValueError):
    pass


class DataError(TaprecError, ValueError):
    pass


class WrongHeadError(TaprecError, TypeError):
    """Operation requires a different head kind than the bundle carries."""


class TrainingDivergenceError(TaprecError, RuntimeError):
    def __init__(self, epoch: int, step: int, value: float):
        self.epoch = epoch
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss {value} at epoch {epoch}, step {step}")


class CheckpointError(TaprecError, ValueError):
    pass


class StageError(TaprecError, RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


class RunError(TaprecError, RuntimeError):
    """One repetition of a repeated-run comparison failed."""

    def __init__(self, strategy: str, run_index: int, cause: BaseException):
        self.strategy = strategy
        self.run_index = run_index
        self.cause = cause
        super().__init__(f"strategy {strategy} run {run_index} failed: {cause}")
