"""Exception types shared across the package.

Argument validation raises plain ``ValueError``; the classes here cover the
failure modes callers (notably the CLI) need to tell apart.
"""


class NumericalError(ArithmeticError):
    """A computation produced NaN/Inf or otherwise failed numerically."""


class DivergenceError(NumericalError):
    """An iterative solver's objective blew up."""

    def __init__(self, message, alpha=None):
        super().__init__(message)
        self.alpha = alpha


class CheckpointError(ValueError):
    """A checkpoint file is corrupt, truncated, or incompatible."""
