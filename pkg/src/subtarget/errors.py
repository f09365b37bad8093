"""Exception hierarchy.

Validation problems (bad input, violated preconditions) and numerical
failures (separation, singular systems, non-convergence) are kept apart so
the command line can map them to distinct exit codes.
"""


class SubtargetError(Exception):
    """Base class for all package errors."""


class ValidationError(SubtargetError, ValueError):
    """Input data or arguments violate a documented precondition."""


class NumericalError(SubtargetError, ArithmeticError):
    """A numerical routine failed to produce a valid answer."""


class SeparationError(NumericalError):
    """The likelihood has no finite maximiser (perfect separation)."""

    def __init__(self, message, direction=0):
        super().__init__(message)
        self.direction = direction


class SingularHessianError(NumericalError):
    """Fluctuation covariates are linearly dependent."""

    def __init__(self, message, dependent=()):
        super().__init__(message)
        self.dependent = tuple(dependent)


class ConvergenceError(NumericalError):
    """An iterative solver ran out of iterations."""

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last
