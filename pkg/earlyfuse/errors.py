"""Exception hierarchy for earlyfuse.

Every error also derives from the builtin exception callers would expect
(``ValueError``, ``IndexError``, ``RuntimeError``), so code written against
the builtins keeps working.
"""

from typing import Optional, Sequence


class EarlyFuseError(Exception):
    """Base class for all earlyfuse errors."""


class ConfigurationError(EarlyFuseError, ValueError):
    """Invalid configuration value, key, or combination of settings."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class ArchitectureMismatchError(ConfigurationError):
    """A checkpoint or parameter table does not fit the configured model."""


class DimensionError(EarlyFuseError, ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes: Sequence[int], detail: str = ""):
        shown = " and ".join(str(tuple(s)) for s in shapes)
        message = f"{op}: incompatible shapes {shown}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)


class TokenIndexError(EarlyFuseError, IndexError):
    """Row index out of range, or duplicated where uniqueness is required."""


class CheckpointFormatError(EarlyFuseError, ValueError):
    """Checkpoint bytes are not a readable checkpoint of a supported version."""


class NonFiniteLossError(EarlyFuseError, RuntimeError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, step: int, loss_v: float, loss_a: float):
        super().__init__(
            f"Non-finite loss at step {step}: loss_v={loss_v!r}, loss_a={loss_a!r}"
        )
        self.step = step
        self.loss_v = loss_v
        self.loss_a = loss_a
