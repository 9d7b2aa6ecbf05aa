"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3.
"""


class BoxRefineError(Exception):
    """Base class for package errors."""


class ConfigError(BoxRefineError):
    """Invalid or inconsistent configuration / usage."""


class DataError(BoxRefineError):
    """Malformed, missing, or non-finite input data."""


class NumericError(BoxRefineError):
    """Numerical failure (non-finite loss, diverged refinement step)."""
