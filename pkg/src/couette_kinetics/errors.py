"""Exception types shared across the package."""


class KineticsError(Exception):
    """Base class for solver errors."""


class ConfigError(KineticsError, ValueError):
    pass


class DomainError(KineticsError, ValueError):
    pass


class BranchError(KineticsError, ValueError):
    pass


class GrazingError(KineticsError, ValueError):
    pass


class NumericError(KineticsError, ArithmeticError):
    pass


class NonConvergenceError(KineticsError, RuntimeError):
    """Raised when an iteration exceeds its cap; carries the residual history."""

    def __init__(self, message: str, history=None, stage=None):
        super().__init__(message)
        self.history = list(history or [])
        self.stage = stage


class PreconditionError(KineticsError, ValueError):
    pass
