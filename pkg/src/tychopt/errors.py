"""Exception hierarchy shared by all tychopt modules."""


class TychoptError(Exception):
    """Base class for every error raised by the package."""


class NonPositiveScaling(TychoptError, ValueError):
    pass


class NotPSD(TychoptError, ValueError):
    pass


class RejectionBudgetExceeded(TychoptError, RuntimeError):
    pass


class InfeasibleSigmaPoint(TychoptError, ValueError):
    pass


class ZeroInertia(TychoptError, ValueError):
    pass


class StepUnderflow(TychoptError, RuntimeError):
    pass


class DimensionMismatch(TychoptError, ValueError):
    pass


class InvalidBounds(TychoptError, ValueError):
    pass


class UnknownName(TychoptError, KeyError):
    pass


class NonFiniteEvaluation(TychoptError, FloatingPointError):
    pass


class ConfigError(TychoptError, ValueError):
    """Raised for malformed or inconsistent configuration files."""

    def __init__(self, message, key=None):
        if key and not message.startswith(key):
            message = f"{key}: {message}"
        super().__init__(message)
        self.key = key


class GimbalProximityWarning(UserWarning):
    pass
