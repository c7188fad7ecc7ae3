"""Exception types shared across the package."""


class SpilError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(SpilError, ValueError):
    """An argument violates a documented precondition."""


class DegenerateCovarianceError(SpilError):
    """The covariance matrix has no usable principal direction."""


class CheckpointVersionError(SpilError):
    """A checkpoint file carries an unsupported version tag."""
