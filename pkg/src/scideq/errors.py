"""Exception hierarchy shared across the package."""


class SciDeqError(Exception):
    """Base class for all package errors."""


class DimMismatch(SciDeqError, ValueError):
    pass


class SingularMatrix(SciDeqError, ArithmeticError):
    pass


class NotSymmetric(SciDeqError, ValueError):
    pass


class DegenerateMask(SciDeqError, ValueError):
    """Some pixel is not covered by any mask, so the Gram diagonal vanishes."""


class NotDifferentiable(SciDeqError, ValueError):
    pass


class NotSquareFrame(SciDeqError, ValueError):
    pass


class Diverged(SciDeqError, ArithmeticError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class NotConverged(SciDeqError, RuntimeError):
    """Iteration budget exhausted; the partial trace rides along."""

    def __init__(self, message, trace=None, x=None):
        super().__init__(message)
        self.trace = trace
        self.x = x


class SizeLimitExceeded(SciDeqError, ValueError):
    pass


class TrainingFailed(SciDeqError, RuntimeError):
    """Too many consecutive aborted steps; carries the last parameters and history."""

    def __init__(self, message, params=None, history=None):
        super().__init__(message)
        self.params = params
        self.history = history
