"""Exception types shared across the package."""


class RbdsdeError(Exception):
    """Base class for package errors."""


class ValidationError(RbdsdeError):
    """Bad inputs or configuration; maps to CLI exit code 2."""


class NumericsError(RbdsdeError):
    """Numerical failure during a run; maps to CLI exit code 3."""


class RegressionError(NumericsError):
    """Least-squares regression failed (rank deficiency, non-finite values)."""


class RangeError(NumericsError):
    """Query outside a tabulated range."""
