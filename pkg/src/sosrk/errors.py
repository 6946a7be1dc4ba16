"""Exception hierarchy shared by all modules."""


class SOSRKError(Exception):
    pass


class InputError(SOSRKError, ValueError):
    """Invalid argument (bad step size, unknown name, malformed grid...)."""


class StateError(SOSRKError, RuntimeError):
    """Operation not possible in the current object state."""


class StepFailure(SOSRKError, ArithmeticError):
    """A single step could not be completed; callers reject and shrink h.

    ``reason`` is one of ``"nonfinite"``, ``"newton"``, ``"linear_solve"``,
    ``"domain"``.
    """

    def __init__(self, reason, message=""):
        super().__init__(message or reason)
        self.reason = reason


class IntegrationFailure(SOSRKError, RuntimeError):
    """The adaptive loop gave up; ``solution`` carries partial diagnostics."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution
