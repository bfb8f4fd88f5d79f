"""Exception types shared across the package."""


class GKDError(Exception):
    """Base class for every error raised by gkd."""


class ParameterError(GKDError, ValueError):
    """Invalid argument value or shape."""


class NumericError(GKDError, ArithmeticError):
    """Non-finite or numerically invalid quantity."""


class ConfigError(GKDError):
    """Bad configuration, or a phase requested without its prerequisites."""

    def __init__(self, message, missing_phase=None):
        super().__init__(message)
        self.missing_phase = missing_phase


class TrainingDiverged(NumericError):
    def __init__(self, phase, step, detail=""):
        super().__init__(f"non-finite loss in phase {phase} at step {step} {detail}".strip())
        self.phase = phase
        self.step = step


class FrozenParameterMutated(GKDError, AssertionError):
    """A parameter that belongs to a frozen component changed."""


class LoadError(GKDError):
    """Checkpoint or dataset files do not match what was expected."""
