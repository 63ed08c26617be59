"""Exception hierarchy shared across the toolkit.

Every error raised on a bad input or a degenerate numerical situation derives
from PlumekitError so the CLI can map them to exit code 2 (user/input error).
"""


class PlumekitError(Exception):
    """Base class for all toolkit errors."""


# --- raster / header ingestion ---

class MissingField(PlumekitError):
    """A required header field is absent."""


class UnsupportedInterleave(PlumekitError):
    """Only BIL-ordered rasters are supported."""


class UnsupportedDataType(PlumekitError):
    """Raster sample type outside {int16, float32, float64}."""


class MalformedWavelengthList(PlumekitError):
    """Wavelength list unparsable, wrong length, or not strictly increasing."""


class OutOfBounds(PlumekitError):
    """Requested window exceeds raster bounds."""


class IoFailure(PlumekitError):
    """Backing file unreadable or inconsistent with its header."""


class InvalidGeometry(PlumekitError):
    """Tile size/overlap incompatible with the image dimensions."""


# --- spectra ---

class EmptySelection(PlumekitError):
    """No band falls inside the requested wavelength range."""


class MalformedTable(PlumekitError):
    """Two-column spectrum table unparsable."""


class AllZeroSignature(PlumekitError):
    """Target signature resampled to the zero vector."""


# --- land cover / statistics ---

class DimensionMismatch(PlumekitError):
    """Operands disagree on shape."""


class DegenerateClass(PlumekitError):
    """Class has too few samples for statistics."""


class NotPositiveDefinite(PlumekitError):
    """Covariance not invertible even after regularization."""


class MissingClassStats(PlumekitError):
    """Class map references a class without statistics."""


class DegenerateWindow(PlumekitError):
    """Column window has too few valid pixels."""


class ZeroDenominator(PlumekitError):
    """Quadratic form in a ratio evaluated to a non-positive value."""


# --- detector ---

class BadGeometry(PlumekitError):
    """Tensor shape incompatible with the network geometry."""


class OddDimension(PlumekitError):
    """Positional embedding width must be even."""


# --- matching / metrics ---

class NonFiniteCost(PlumekitError):
    """Cost matrix contains NaN or infinity."""


class TooFewPredictions(PlumekitError):
    """Fewer predictions than ground-truth instances."""


class DegenerateBox(PlumekitError):
    """Box has non-positive width or height."""


class ResolutionMismatch(PlumekitError):
    """Mask resolutions are not compatible for comparison."""


class EmptyGroundTruth(PlumekitError):
    """Metric undefined without ground-truth instances."""


# --- annotation mapping ---

class InsufficientPairs(PlumekitError):
    """Homography estimation needs at least four correspondences."""


class DegenerateConfiguration(PlumekitError):
    """Correspondences do not determine a homography (e.g. collinear points)."""


class NonInvertibleHomography(PlumekitError):
    """Homography matrix is numerically singular."""
