"""Exception hierarchy shared by all modules."""


class JPMReadoutError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(JPMReadoutError, ValueError):
    pass


class TruncationError(JPMReadoutError):
    """Fock-space truncation is too small for the requested state or evolution."""


class StepSizeError(JPMReadoutError):
    """A physicality check failed during integration even after halving dt."""


class ConvergenceError(JPMReadoutError):
    pass


class NumericalError(JPMReadoutError):
    pass


class ZeroNormError(JPMReadoutError):
    pass


class DegenerateBranchError(JPMReadoutError):
    pass


class ConfigError(JPMReadoutError):
    """Invalid experiment configuration. ``path`` names the offending key."""

    def __init__(self, message, path=None):
        self.path = path
        if path:
            message = f"{path}: {message}"
        super().__init__(message)
