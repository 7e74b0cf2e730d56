"""Exception types shared across the package."""


class CactusError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(CactusError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(CactusError, ValueError):
    """A configuration value is missing, unknown, or out of range."""


class DataFormatError(CactusError, ValueError):
    """A data or checkpoint file is structurally invalid."""


class DivergenceError(CactusError, RuntimeError):
    """Training produced a non-finite loss."""
