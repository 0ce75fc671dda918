"""Exception types shared across the package.

ValidationError covers violated preconditions and malformed inputs (CLI exit
code 1); everything else that escapes is a runtime failure (exit code 2).
"""


class UnitscopeError(Exception):
    pass


class ValidationError(UnitscopeError, ValueError):
    """A contract violation: bad shapes, bad flags, malformed files."""


class ShapeError(ValidationError):
    """Tensor dimensions inconsistent with an operation's contract."""


class ManifestError(ValidationError):
    """Model manifest failed to parse or is internally inconsistent."""


class WeightBlobError(ValidationError):
    """Weight blob does not match the manifest's declared layout."""


class AnnotationLogError(UnitscopeError):
    """Annotation log is corrupt beyond the recoverable trailing record."""


class TrainingDiverged(UnitscopeError):
    """Non-finite gradients encountered during training."""
