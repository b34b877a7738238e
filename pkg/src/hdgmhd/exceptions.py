"""Exception types raised by the solver stack."""


class HDGError(Exception):
    """Base class for all package errors."""


class InternalError(HDGError, RuntimeError):
    """A numerical invariant broke (singular mass matrix, bad moment system...)."""


class SingularSystemError(HDGError):
    """The sparse factorization detected a numerically singular matrix."""


class NonConvergenceError(HDGError):
    """The Oseen iteration hit ``max_iter`` without meeting the tolerance."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = list(log or [])
