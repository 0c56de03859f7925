class HcmtError(Exception):
    """Base class for all package errors."""


class ConfigError(HcmtError, ValueError):
    pass


class ShapeError(HcmtError, ValueError):
    pass


class DataError(HcmtError):
    pass


class NumericError(HcmtError, ArithmeticError):
    pass


class StateError(HcmtError, RuntimeError):
    pass


class NaNLossError(NumericError):
    """Raised by the trainer when a loss turns non-finite; carries the offending record."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
