class PolymerLabError(Exception):
    """Base class for errors raised by polymerlab."""


class ConfigurationError(PolymerLabError, ValueError):
    """Invalid model or experiment configuration."""


class UsageError(PolymerLabError, ValueError):
    """A call violated an operation's preconditions."""


class NumericalFailure(PolymerLabError, FloatingPointError):
    """A field became non-finite or lost all mass during evolution."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
