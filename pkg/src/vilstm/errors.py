"""Exception types raised across the package."""


class ViLError(Exception):
    """Base class for all package errors."""


class DimensionError(ViLError, ValueError):
    """Operand shapes are incompatible with the documented contract."""


class DomainError(ViLError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ConfigError(ViLError, ValueError):
    """A configuration value is invalid or inconsistent."""


class NumericError(ViLError, ArithmeticError):
    """A non-finite value appeared where a finite one was required."""


class GraphError(ViLError, RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, double backward, ...)."""
