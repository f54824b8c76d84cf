"""Exception types raised by the backend.

Everything derives from Sl4SlamError so callers can catch the whole family
with one clause.  Optimizer non-convergence is reported through the
OptimizerReport flag, not an exception.
"""


class Sl4SlamError(Exception):
    """Base class for all errors raised by this package."""


class NonPositiveDeterminantError(Sl4SlamError):
    """Matrix cannot be normalized onto SL(4) because det <= tolerance."""


class LogDivergenceError(Sl4SlamError):
    """Matrix logarithm iteration failed to converge to the principal branch."""


class PointAtInfinityError(Sl4SlamError):
    """Homography action sent a point to (or too close to) the plane at infinity."""


class SingularProjectionError(Sl4SlamError):
    """Projection matrix has a (near) singular camera block and cannot be decomposed."""


class DimensionMismatchError(Sl4SlamError):
    """Input array shapes are inconsistent with each other or with the contract."""


class InsufficientPointsError(Sl4SlamError):
    """Fewer valid correspondences than the required minimum."""


class EmptyCorrespondencesError(Sl4SlamError):
    """A correspondence set that must be non-empty is empty."""


class OverlapViolationError(Sl4SlamError):
    """Consecutive submaps do not share the required overlap frame."""


class GaugeDeficientError(Sl4SlamError):
    """Factor graph has no prior, so the global gauge is unconstrained."""


class DegenerateConfigurationError(Sl4SlamError):
    """Point set is degenerate (coincident or collinear) for alignment."""


class NoAssociationsError(Sl4SlamError):
    """No trajectory timestamp pairs found within the association window."""


class TrajectoryOutOfBoundsError(Sl4SlamError):
    """Requested camera trajectory leaves the scene volume or enters a primitive."""


class FormatError(Sl4SlamError):
    """A binary blob or manifest does not conform to the dataset format."""


class ParseError(Sl4SlamError):
    """A text file (trajectory) could not be parsed.

    Carries the 1-based line number of the offending line.
    """

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line
