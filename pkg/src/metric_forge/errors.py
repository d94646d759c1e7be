"""Exception types raised across metric_forge."""


class MetricForgeError(Exception):
    """Base class for all package errors."""


class NormalizeZeroVector(MetricForgeError, ValueError):
    pass


class NoPositives(MetricForgeError, ValueError):
    pass


class NoNegatives(MetricForgeError, ValueError):
    pass


class DegenerateDistance(MetricForgeError, ValueError):
    pass


class BatchTooSmall(MetricForgeError, ValueError):
    pass


class TooFewClasses(MetricForgeError, ValueError):
    pass


class NonFiniteLoss(MetricForgeError, FloatingPointError):
    pass


class EmptyGallery(MetricForgeError, ValueError):
    pass


class ConfigInvalid(MetricForgeError, ValueError):
    pass


class ParseError(MetricForgeError, ValueError):
    """Malformed dataset, checkpoint or distance file.

    ``line`` is the 1-based line number when the failure is tied to one.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
