"""
Exceptions raised by cvtocc.

Every error that a caller is expected to handle derives from CvtOccError, so the command line
can map the whole family onto exit codes in one place.
"""


class CvtOccError(Exception):
    """Base class for all cvtocc errors."""


class BoundsError(CvtOccError):
    """A voxel index lies outside the grid."""


class InvalidPoseError(CvtOccError):
    """A pose matrix is not a valid rigid transform."""


class ShapeError(CvtOccError):
    """Tensor or grid shapes do not agree."""


class ConfigError(CvtOccError):
    """A configuration value, key or combination of values is invalid."""


class DomainError(CvtOccError):
    """A value is outside the domain of a function."""


class UsageError(CvtOccError):
    """An API was called in an order or state it does not support."""


class NonFiniteError(CvtOccError):
    """A forward operation produced NaN or infinity."""


class DivergenceError(CvtOccError):
    """Training produced a non-finite loss."""


class HistoryRangeError(CvtOccError):
    """Not enough trajectory history for the requested frame window."""


class ContainerError(CvtOccError):
    """A dataset or checkpoint file is malformed or fails its checksum."""
