"""Exception types raised across the package."""


class APAError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(APAError, ValueError):
    pass


class StepRangeError(APAError, IndexError):
    pass


class NumericalFailureError(APAError, FloatingPointError):
    """A tensor became non-finite; ``step`` names where, when known."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TrainingFailureError(APAError, RuntimeError):
    pass


class DegenerateConfigError(APAError, ValueError):
    pass


class HookError(APAError, RuntimeError):
    """A per-step denoising hook raised; the original error is chained."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class ArtifactError(APAError, RuntimeError):
    """On-disk artifacts are missing, corrupt or belong to another config."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = None if path is None else str(path)
