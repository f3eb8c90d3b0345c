"""Exception types shared across the package."""


class ScaleSelError(Exception):
    """Base class for all scalesel errors."""


class FormatError(ScaleSelError):
    """Malformed binary file: bad magic, version, or structure."""


class TruncationError(FormatError):
    """Binary payload shorter than its declared size."""


class ValidationError(ScaleSelError):
    """Input violates a documented invariant."""


class ShapeError(ValidationError):
    """Mismatched array, grid, or configuration shapes."""


class CapacityError(ValidationError):
    """Request exceeds what the configuration can hold."""


class EmptySelectionError(ValidationError):
    """An operation requiring a non-empty feature selection got none."""


class InvalidActionError(ScaleSelError):
    """Action not permitted in the current environment state."""


class UnsupportedError(ScaleSelError):
    """Operation outside the supported parameter range."""


class DivergenceError(ScaleSelError):
    """Training produced non-finite numbers."""
