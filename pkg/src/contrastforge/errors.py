"""Exception types raised across the package."""


class ContrastForgeError(Exception):
    """Base class for all package errors."""


class ValidationError(ContrastForgeError, ValueError):
    """Invalid geometry, values or arguments."""


class GeometryError(ValidationError):
    pass


class FormatError(ContrastForgeError):
    """File content does not follow the expected layout."""


class UnsupportedError(FormatError):
    pass


class SchemaError(ValidationError):
    pass


class RangeError(ValidationError):
    pass


class DegenerateIntensityError(ValidationError):
    pass


class EstimationError(ContrastForgeError):
    """Not enough data to estimate a statistic."""


class ConvergenceError(ContrastForgeError):
    pass


class ConsistencyError(ContrastForgeError):
    """Stored content disagrees with its declared configuration."""


class NumericalError(ContrastForgeError):
    """Non-finite values produced during optimization."""


class TruncatedFileError(FormatError, OSError):
    """File ends before its declared payload does."""
