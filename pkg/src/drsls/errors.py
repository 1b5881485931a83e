"""Exception types shared across the package."""


class DrslsError(Exception):
    """Base class for all package errors."""


class ValidationError(DrslsError, ValueError):
    """Raised on malformed inputs (shapes, ranges, config fields).

    ``field`` names the offending input when known, so callers can report
    field-level messages.
    """

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class ConditioningError(DrslsError, ArithmeticError):
    """A matrix that must be well conditioned is (numerically) singular."""


class InternalConsistencyError(DrslsError, RuntimeError):
    """A computed quantity violates a structural property it must have."""


class SolverError(DrslsError, RuntimeError):
    """An optimization problem did not solve to optimality."""

    def __init__(self, message, status=None, table=None):
        super().__init__(message)
        self.status = status
        self.table = table


class SamplingError(DrslsError, RuntimeError):
    """Rejection sampling ran out of tries."""
