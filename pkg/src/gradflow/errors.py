"""Exception types shared across the package."""


class GradflowError(Exception):
    pass


class UsageError(GradflowError, ValueError):
    """Bad arguments: wrong dimensions, unsupported energy kind, mode mismatch."""


class ConfigError(UsageError):
    """Invalid configuration. ``field`` names the offending key when known."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class DivergenceError(GradflowError, ArithmeticError):
    """A chain, ODE solve or training run produced non-finite or exploding values.

    ``step`` is the chain step, solver step or training iteration at which it
    happened (None if unknown).
    """

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class StiffnessError(GradflowError):
    """Adaptive solver exceeded its step budget."""


class InvertibilityError(GradflowError):
    """Fixed-point inversion of an Euler step did not converge."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class UnsupportedError(UsageError):
    pass
