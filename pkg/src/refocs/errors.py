class ReFOCSError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ReFOCSError):
    pass


class DataError(ReFOCSError):
    pass


class NumericAbort(ReFOCSError):
    """Raised when a training loss becomes non-finite.

    ``losses`` holds the per-term values of the offending step.
    """

    def __init__(self, message, losses=None):
        super().__init__(message)
        self.losses = dict(losses or {})
