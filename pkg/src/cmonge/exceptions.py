"""Exception hierarchy.

The CLI maps these onto exit codes: configuration problems exit with 2,
data problems with 3 and numerical failures with 4.
"""


class CMongeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CMongeError, ValueError):
    """Invalid or inconsistent experiment configuration."""


class DataError(CMongeError, ValueError):
    """Malformed dataset, embedding table or split request."""


class NumericalError(CMongeError, ArithmeticError):
    """A numerical routine failed (non-finite values, no convergence)."""


class NotFittedError(CMongeError, AttributeError):
    """Estimator used before ``fit``."""
