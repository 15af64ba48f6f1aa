"""Exception types shared across the package.

Two failure families matter to callers: bad inputs (exit code 2 at the
CLI) and numerical breakdowns during fitting (exit code 3).
"""


class HeatburdenError(Exception):
    """Base class for package errors."""


class InputError(HeatburdenError):
    """Invalid or inconsistent user-supplied data or configuration."""


class NumericError(HeatburdenError):
    """Numerical failure: non-convergence, factorization breakdown, etc."""
