"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid user configuration or operation arguments."""


class NumericalError(RuntimeError):
    """Base class for numerical failures (CLI exit code 3)."""


class IllConditionedError(NumericalError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class StaleGuidanceError(RuntimeError):
    pass


class DegenerateRotationError(ValueError):
    pass
