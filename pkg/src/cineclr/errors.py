"""Exception hierarchy shared across the package."""


class CineclrError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CineclrError):
    """A config value or a tensor shape violates a documented contract."""


class InputDataError(CineclrError):
    """Runtime data (labels, images, masks) is malformed for the operation."""


class UsageError(CineclrError):
    """An API was called in an unsupported way (e.g. backward on a non-scalar)."""


class NumericsError(CineclrError):
    """A forward computation produced NaN or Inf from finite inputs."""


class DatasetFormatError(CineclrError):
    """Base for on-disk dataset problems."""


class TruncatedRasterError(DatasetFormatError):
    """A raster file ended before its declared payload."""


class ManifestError(DatasetFormatError):
    """manifest.csv is malformed or references missing files."""


class CheckpointError(CineclrError):
    """A checkpoint file is malformed or inconsistent."""


class UndefinedAUCError(CineclrError):
    """AUC requested on a degenerate label set."""
