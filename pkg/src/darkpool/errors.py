# Copyright © 2025 PI & Other Tales Inc.. All Rights Reserved.
"""Exceptions raised by the solvers, the simulator and the pipeline."""

from __future__ import annotations

from typing import Optional


class DarkPoolError(Exception):
    """Base class for every failure reported by this package."""


class ConfigurationError(DarkPoolError):
    """Invalid, unknown or missing configuration."""


class InvalidInputError(DarkPoolError, ValueError):
    """An operation was called outside its domain."""


class AdmissibilityError(DarkPoolError):
    """A control fails the second-order (concavity) admissibility condition."""


class NumericalError(DarkPoolError):
    """A numerical scheme left its stability region or produced non-finite values."""


class ConvergenceError(DarkPoolError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(
        self, message: str, iterations: int = 0, residual: Optional[float] = None
    ) -> None:
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual

    def __str__(self) -> str:
        base = super().__str__()
        if self.residual is None:
            return f"{base} (after {self.iterations} iterations)"
        return f"{base} (after {self.iterations} iterations, residual {self.residual:.3e})"
