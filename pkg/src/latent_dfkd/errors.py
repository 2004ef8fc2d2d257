"""Exception types shared across the package."""


class ContractError(ValueError):
    """Raised when an operation is called outside its preconditions."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration, detected before any compute."""


class SingularScheduleError(ContractError):
    """A schedule coefficient makes the requested step undefined (alpha_t == 0)."""


class DivergenceError(RuntimeError):
    """Training stopped improving or produced a non-finite loss."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class NonFiniteError(RuntimeError):
    """A latent, gradient or loss term became NaN/inf during synthesis."""

    def __init__(self, message, term=None, timestep=None):
        super().__init__(message)
        self.term = term
        self.timestep = timestep
