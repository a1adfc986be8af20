from __future__ import annotations

from typing import Any


class OtDroError(Exception):
    """Base class for every error raised by otdro."""

    exit_code: int = 1


class ConfigurationError(OtDroError, ValueError):
    """Invalid configuration, schema or problem data."""

    exit_code = 2


class DataError(ConfigurationError):
    """A data file could not be parsed."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")
        self.row = row
        self.column = column


class NumericalError(OtDroError, ArithmeticError):
    """A numerical routine could not produce a trustworthy answer."""

    exit_code = 3


class InfeasibleDomainError(NumericalError):
    """λ lies below λ_thr(β), so ℓ_rob is +∞."""


class NonconcaveRegimeError(NumericalError):
    """λ ≤ λ′_thr(β): F is not known to be concave in γ, bisection does not apply."""

    def __init__(self, message: str, theta: Any = None):
        super().__init__(message)
        self.theta = theta


class KinkError(NumericalError):
    """The loss is not differentiable at the transported point."""


class UnboundedIntervalError(NumericalError):
    """The compact search interval for γ is infinite."""


class DegenerateBoundsError(NumericalError):
    """The lower bound on E[ℓ′(βᵀX)²] collapsed to zero."""
