"""Exception hierarchy. CLI exit codes are attached to the classes."""


class AnatsegError(Exception):
    exit_code = 2


class FormatError(AnatsegError):
    """Malformed or missing on-disk artifact."""


class ConsistencyError(AnatsegError):
    """Data violates a structural invariant (dimension mismatch, bad gap)."""


class LabelError(AnatsegError):
    """Mask contains a label outside {0, 1, 2, 3}."""


class InputError(AnatsegError, ValueError):
    """Argument is well-typed but unusable (empty mask, wrong size...)."""


class ParameterError(AnatsegError, ValueError):
    """Numeric parameter out of its allowed range."""


class NumericalError(AnatsegError):
    exit_code = 3


class TrainingError(NumericalError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class SamplingExhaustedError(NumericalError):
    """Rejection sampling hit its trial budget; ``partial`` holds what was accepted."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class StageError(AnatsegError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 2)
