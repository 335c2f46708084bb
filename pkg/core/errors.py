class PinnForgeError(Exception):
    """Base class for every error raised by pinnforge."""


class ADError(PinnForgeError):
    pass


class SpecError(PinnForgeError, ValueError):
    pass


class ShapeError(PinnForgeError, ValueError):
    pass


class ParameterError(PinnForgeError, ValueError):
    pass


class SamplingError(PinnForgeError, ValueError):
    pass


class PhysicsError(PinnForgeError, ValueError):
    pass


class ConfigError(PinnForgeError, ValueError):
    pass


class EvaluationError(PinnForgeError):
    pass


class DivergenceError(PinnForgeError, ArithmeticError):
    """Raised when the loss or a gradient stops being finite."""

    def __init__(self, message: str, step: int | None = None, components: dict | None = None):
        super().__init__(message)
        self.step = step
        self.components = components or {}
