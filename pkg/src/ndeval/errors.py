"""Engine exception hierarchy.

The CLI maps these onto process exit codes: ValidationError -> 2,
FormatError (and plain IO errors) -> 3, NumericError -> 4.
"""


class EngineError(Exception):
    """Base class for all engine errors."""


class ValidationError(EngineError):
    """Inputs violate a documented precondition (shapes, ranges, config)."""


class FormatError(EngineError):
    """A file or byte stream does not conform to its declared format."""


class NumericError(EngineError):
    """Non-finite values or other numeric failure states."""
