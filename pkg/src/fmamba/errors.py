"""Exception types shared across the package."""


class FmambaError(Exception):
    """Base class for all package errors."""


class ShapeError(FmambaError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(FmambaError, ValueError):
    """A configuration record violates its invariants."""


class ValidationError(FmambaError, ValueError):
    """Input data failed a checked-mode validation."""


class NumericalAbort(FmambaError, RuntimeError):
    """Training produced a non-finite value and was stopped."""

    def __init__(self, message, step=None, components=None):
        super().__init__(message)
        self.step = step
        self.components = dict(components or {})


class NonFiniteError(FmambaError, FloatingPointError):
    """A tensor produced in checked mode contains NaN or Inf."""
