"""Exception hierarchy shared across the package."""


class CascadeWarpError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(CascadeWarpError):
    """Operands disagree on a required dimension."""


class ConfigError(CascadeWarpError):
    """Invalid or unknown configuration value."""


class DataFormatError(CascadeWarpError):
    """A file failed structural validation (bad magic, truncated payload, ...)."""


class GradientError(CascadeWarpError):
    """Backward pass invoked in an invalid state (missing grad, non-scalar root)."""


class NonFiniteLossError(CascadeWarpError):
    """Training produced a NaN/Inf loss.

    Carries the failing step index and the last finite train record (or None).
    """

    def __init__(self, message, step, last_record=None):
        super().__init__(message)
        self.step = step
        self.last_record = last_record
