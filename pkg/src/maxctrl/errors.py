"""Exception types shared across the package."""


class MaxctrlError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(MaxctrlError):
    """Invalid grid specification, experiment configuration, or mode mismatch."""


class ShapeError(MaxctrlError):
    """An assembled matrix disagrees with the expected dimension bookkeeping."""


class DimensionMismatch(MaxctrlError):
    """A supplied vector does not match the layout it is meant to fill."""


class SingularM1(MaxctrlError):
    """The one-step system matrix could not be factorized (assembly bug)."""


class CapExceeded(MaxctrlError):
    """A dense-mode operation was requested above the configured size cap."""


class SchurSingular(MaxctrlError):
    """The control system is rank deficient: the terminal state is not reachable.

    Carries diagnostics so callers can report what was attempted.
    """

    def __init__(self, message, rank=None, dim=None, residual=None):
        super().__init__(message)
        self.rank = rank
        self.dim = dim
        self.residual = residual


class IOErrorWithPath(MaxctrlError):
    """File input/output failure, annotated with the offending path."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path
