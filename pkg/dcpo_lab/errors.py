"""Exception types raised across the lab."""

from __future__ import annotations

from typing import Optional


class LabError(Exception):
    pass


class ConfigurationError(LabError, ValueError):
    """Invalid configuration value (difficulty spec, lambda, clip ratios, ...)."""


class UsageError(LabError, ValueError):
    """Caller violated an operation's precondition."""


class FormatError(LabError, ValueError):
    """Text does not follow the `<conf> Confidence: <float>` grammar."""


class NumericError(LabError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    def __init__(self, step: int, message: Optional[str] = None) -> None:
        self.step = step
        super().__init__(message or f"parameters became non-finite at step {step}")


class StorageError(LabError, OSError):
    """A run record could not be written."""
