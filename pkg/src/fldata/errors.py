"""Exception hierarchy shared across the package."""


class FLDataError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class DimensionError(FLDataError, ValueError):
    pass


class StructureError(FLDataError, ValueError):
    pass


class InfeasibleError(FLDataError):
    """Equality constraint cannot be satisfied.

    ``residual`` holds the least-squares constraint residual norm.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class JacobianMismatchError(FLDataError):
    pass


class EvaluationError(FLDataError):
    def __init__(self, message, step=None, state=None):
        super().__init__(message)
        self.step = step
        self.state = state


class LinearDependenceError(FLDataError):
    pass


class EstimationError(FLDataError):
    pass


class PlantOverflowError(FLDataError, FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CollectionError(FLDataError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ProbeError(FLDataError):
    pass
