"""
Exception hierarchy shared by every ELAS module.
"""

from typing import Any, Dict, Optional


class ElasError(Exception):
    """Base class for all ELAS errors."""
    pass


class ShapeError(ElasError, ValueError):
    """Dimension or shape contract violation."""
    pass


class PatternError(ShapeError):
    """Matrix does not satisfy the 2:4 pattern."""

    def __init__(self, row: int, group: int, nonzeros: int):
        self.row = row
        self.group = group
        self.nonzeros = nonzeros
        super().__init__(
            f"2:4 pattern violated at row {row}, group {group} "
            f"({nonzeros} nonzeros in 4)"
        )


class FormatError(ElasError, ValueError):
    """Malformed packed metadata or serialized bytes."""
    pass


class NumericError(ElasError, ArithmeticError):
    """Numerical routine failed to produce a finite, converged result."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class NonFiniteGradientError(NumericError):
    """A gradient contains NaN or Inf; the optimizer step was aborted."""
    pass


class ConfigurationError(ElasError, ValueError):
    """Invalid configuration or missing calibration."""
    pass


class ContractViolationError(ElasError):
    """Caller broke an API precondition (stale saved state, bad token ids)."""
    pass


class CheckpointError(ElasError):
    """Checkpoint file is unreadable, truncated, corrupt or incompatible."""
    pass


class EmptySplitError(ElasError):
    """Requested corpus split holds too few tokens for a single window."""
    pass
