"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


class DomainError(ValueError):
    """A hyperparameter or input lies outside its valid domain."""


class ConfigError(ValueError):
    """An experiment or serialized config is malformed."""


class NaNAbort(RuntimeError):
    """A non-finite value appeared during training; the step was not applied."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
