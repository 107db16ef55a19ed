"""Exception hierarchy shared across the pipeline.

The CLI maps these to exit codes: ConfigError -> 2, DataError (and its
subclass FormatError) -> 3, DetectorError -> 4.
"""


class LidarstError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(LidarstError):
    """Invalid or inconsistent configuration."""


class DataError(LidarstError):
    """Missing or inconsistent on-disk data."""


class FormatError(DataError):
    """Malformed file contents (wrong field count, bad floats, ...)."""


class DetectorError(LidarstError):
    """External detector command failed."""
