"""
Errors - exception hierarchy shared by every bodyimage module
"""


class BodyImageError(Exception):
    """Base class for all bodyimage failures."""


class DimensionError(BodyImageError, ValueError):
    """Input vector or matrix has the wrong shape or non-finite entries."""


class FormatError(BodyImageError, ValueError):
    """Serialized stream is corrupt or truncated."""


class VersionError(FormatError):
    """Serialized stream was written by an incompatible format version."""


class ModelFileError(BodyImageError, ValueError):
    """Model file could not be parsed or failed schema validation."""


class TrainingDivergedError(BodyImageError, RuntimeError):
    """Training produced a non-finite loss; parameters were rolled back."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report
