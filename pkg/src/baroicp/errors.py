"""Exception types raised across the package."""


class BaroIcpError(Exception):
    """Base class for all package errors."""


class InvalidInputError(BaroIcpError, ValueError):
    """Input violates a precondition (non-finite, non-positive, wrong shape)."""


class DegenerateFitError(BaroIcpError):
    """Calibration design matrix is rank deficient.

    ``directions`` names the coefficients spanning the deficient subspace.
    """

    def __init__(self, message, directions=()):
        super().__init__(message)
        self.directions = tuple(directions)


class OutOfRangeError(BaroIcpError):
    def __init__(self, message, timestamp=None):
        super().__init__(message)
        self.timestamp = timestamp


class NoOverlapError(BaroIcpError):
    """Correspondence search produced no pairs."""


class ConfigurationError(BaroIcpError):
    pass


class EmptyScanError(BaroIcpError):
    """Simulated sensor sees no surface from the requested pose."""


class AssociationError(BaroIcpError):
    """Two trajectories share no time-associated samples."""
