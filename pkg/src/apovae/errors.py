"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """Raised for malformed or out-of-domain inputs."""


class NonFiniteError(FloatingPointError):
    """Raised when a computation produces NaN or Inf."""


class TapeStateError(RuntimeError):
    """Raised when tape operations are called out of order."""


class UnsupportedModeError(RuntimeError):
    """Raised when a metric needs explicit posterior densities but the model is implicit."""
