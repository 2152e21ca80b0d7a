"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Bad input to a public operation (maps to CLI exit code 1)."""


class NumericalFailure(RuntimeError):
    """A solver did not reach its tolerance within the iteration cap.

    The ``diagnostics`` dict carries the last iterate / residual so callers
    can still inspect a partial result.
    """

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class InfeasibleCertificate(ValueError):
    """Dual candidate violates the conjugate constraint ``|K* g*|_inf <= alpha``."""
