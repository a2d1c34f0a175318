"""Error types raised across the package."""
from typing import Optional


class DfaError(Exception):
    """Base class for all package errors."""


class DomainError(DfaError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class ContractViolationError(DomainError):
    """An input breaks a structural invariant (e.g. an all-zero IBP column)."""


class DegeneratePrecisionError(DomainError):
    """A consensus merge met a shard with zero posterior spread."""


class RatingsValidationError(DomainError):
    """Ratings parsed but violate the rating-matrix invariants."""


class ParseError(DomainError):
    """A text artifact could not be parsed."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class RatingsParseError(ParseError):
    """A ratings file could not be parsed."""


class TrainingDivergenceError(DfaError, RuntimeError):
    """Matrix factorization training produced a non-finite objective."""

    def __init__(self, epoch: int, objective: float):
        self.epoch = epoch
        self.objective = objective
        super().__init__(f"objective became {objective} at epoch {epoch}; lower the learning rate")
