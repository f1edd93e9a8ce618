"""Exception types raised across the package."""


class TwinBeamError(Exception):
    """Base class for all package errors."""


class DomainError(TwinBeamError, ValueError):
    """An argument lies outside the domain of the operation."""


class TruncationError(TwinBeamError):
    """A truncated table cannot hold the requested distribution within budget."""

    def __init__(self, message, tail_mass=None):
        super().__init__(message)
        self.tail_mass = tail_mass


class PrecisionError(TwinBeamError, ArithmeticError):
    """Floating point evaluation lost too many significant digits."""

    def __init__(self, message, relative_error=None):
        super().__init__(message)
        self.relative_error = relative_error


class DegenerateInputError(TwinBeamError, ValueError):
    """Input is valid but degenerate for the requested estimate."""


class NonPhysicalError(TwinBeamError, ValueError):
    """Derived parameters do not describe a physical state."""


class ConvergenceError(TwinBeamError, RuntimeError):
    """An iterative solver failed to reach its tolerance."""


class ConfigError(TwinBeamError, ValueError):
    """Invalid harness configuration."""


class FileFormatError(TwinBeamError, ValueError):
    """A data file cannot be parsed."""
