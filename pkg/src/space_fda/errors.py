"""Exception hierarchy shared across the package.

Every failure mode raised by library code derives from :class:`SpaceFdaError`
so callers (and the CLI exit-code mapping) can distinguish library failures
from programming errors.
"""

from __future__ import annotations


class SpaceFdaError(Exception):
    """Base class for all library errors."""


class InvalidArgumentError(SpaceFdaError, ValueError):
    """An argument violates a documented precondition."""


class SchemaError(SpaceFdaError):
    """A file (CSV/JSON) does not match the expected schema."""


class InsufficientDataError(SpaceFdaError):
    """Too few observations to perform the requested estimate."""


class DegenerateFitError(SpaceFdaError):
    """A local least-squares design is rank deficient.

    Carries the grid node (index and coordinates) where the design collapsed.
    """

    def __init__(self, message: str, node=None):
        super().__init__(message)
        self.node = node


class DegenerateEigenvalueError(SpaceFdaError):
    """A base eigenvalue needed as a denominator is not strictly positive."""


class ConditioningError(SpaceFdaError):
    """A matrix stayed non-positive-definite beyond the jitter budget."""


class NoSignalError(SpaceFdaError):
    """All empirical correlations are non-positive; nothing to fit."""


class ConvergenceFailureError(SpaceFdaError):
    """The optimizer failed to converge on every start.

    ``best`` holds the best parameters found so far, when any exist.
    """

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class BufferTooLargeError(SpaceFdaError):
    """Spatial buffering removed every training curve."""


class UnstableTestError(SpaceFdaError):
    """Too many bootstrap replicates failed for the test to be trusted."""


class UnstableRunError(SpaceFdaError):
    """Too many simulation replicates failed for the summary to be trusted."""
