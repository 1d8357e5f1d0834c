"""Exception hierarchy shared by every module."""


class QCError(Exception):
    """Base class."""


class ShapeError(QCError, ValueError):
    pass


class PreconditionError(QCError, ValueError):
    pass


class ConfigurationError(QCError, ValueError):
    pass


class DomainViolation(QCError, ArithmeticError):
    """A gradient left S+ (det(P^T P) at or below the floor)."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class StencilOutOfDomain(QCError, IndexError):
    pass


class RankDrift(QCError):
    pass


class PhaseMixed(QCError):
    pass


class FrameDiscontinuity(QCError):
    pass


class InitializationError(QCError):
    pass


class SolverStall(QCError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state
