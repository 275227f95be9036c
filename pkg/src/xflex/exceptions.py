"""Package-wide exception types.

The CLI maps ValidationError to exit code 2 and ConvergenceError to exit
code 3; everything else is a plain crash.
"""


class XflexError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(XflexError, ValueError):
    """Bad inputs: malformed files, out-of-range parameters, contract breaches."""


class RankError(ValidationError):
    """Design or basis matrix does not have full column rank."""


class ConvergenceError(XflexError, RuntimeError):
    """An iterative fit stopped without meeting its tolerance."""

    def __init__(self, message: str, grad_norm: float | None = None):
        super().__init__(message)
        self.grad_norm = grad_norm
