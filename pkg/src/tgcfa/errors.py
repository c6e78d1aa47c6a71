"""Exception types shared across the package."""


class TGCFAError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(TGCFAError, ValueError):
    """Input violates a documented precondition or invariant."""


class SchemaError(ValidationError):
    """A structured input file does not match its schema."""


class FormatError(TGCFAError, ValueError):
    """A binary container is corrupt, truncated or of the wrong kind."""


class EncoderError(TGCFAError, RuntimeError):
    """A text encoder provider is unavailable or failed."""


class DegenerateVectorError(TGCFAError, ValueError):
    """A vector has (near) zero norm where a direction is required."""


class NumericError(TGCFAError, ArithmeticError):
    """A loss term or metric became non-finite."""


class GenerationError(TGCFAError, RuntimeError):
    """A synthetic scene could not be generated from its config."""


class ManifestViolation(TGCFAError, PermissionError):
    """A split manifest breaks the single-source training protocol."""
