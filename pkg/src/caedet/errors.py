"""Exception hierarchy shared by every caedet module."""


class CaedetError(Exception):
    """Base class for all library errors."""


class DimensionError(CaedetError, ValueError):
    """Tensor shapes are inconsistent with an operation."""


class NumericError(CaedetError, ArithmeticError):
    """A NaN or Inf reached a kernel or was produced by one."""


class DomainError(CaedetError, ValueError):
    """An argument is outside the domain an operation accepts."""


class StateError(CaedetError, RuntimeError):
    """An object was used out of order (e.g. backward before forward)."""


class ConfigError(CaedetError, ValueError):
    """Model or run configuration is invalid or does not match stored data."""


class FormatError(CaedetError, ValueError):
    """A checkpoint or dataset file is malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
