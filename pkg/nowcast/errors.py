"""
Exception hierarchy for the nowcasting toolkit.
"""

from typing import Optional


class NowcastError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(NowcastError, ValueError):
    """Raised when tensor shapes do not agree."""


class GeometryError(NowcastError, ValueError):
    """Raised when an image does not match the configured crop/patch geometry."""


class ConfigError(NowcastError, ValueError):
    """Raised for unknown keys or malformed run configuration files."""


class DatasetError(NowcastError):
    """Raised when a dataset cannot be assembled from its manifest."""


class ManifestError(DatasetError):
    """Raised for malformed manifest lines."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class TensorFileError(NowcastError):
    """Base class for TensorFile decoding errors."""


class BadMagicError(TensorFileError):
    """The file does not start with the TensorFile magic bytes."""


class UnsupportedVersionError(TensorFileError):
    """The format version is newer than this reader."""


class UnsupportedDtypeError(TensorFileError):
    """The dtype code is not one this reader can decode."""


class TruncatedFileError(TensorFileError):
    """The header or payload ends before its declared length."""


class CheckpointError(NowcastError):
    """Raised when a checkpoint directory is incomplete or inconsistent with its metadata."""
