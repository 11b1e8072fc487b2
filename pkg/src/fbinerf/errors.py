"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: usage errors exit 1, data and domain
errors exit 2, optimizer divergence exits 3.
"""


class FbinerfError(Exception):
    """Base class for all toolkit errors."""


# --- camera / geometry domain errors ---------------------------------------

class NonMonotoneDomain(FbinerfError):
    """Angle or radius falls outside the validated monotone distortion range."""


class BehindCamera(FbinerfError):
    """Point has non-positive depth in the camera frame."""


class NonPositiveDepth(FbinerfError):
    """Depth value must be strictly positive."""


# --- feature extraction ----------------------------------------------------

class ImageTooSmall(FbinerfError):
    """Input image is below the minimum supported resolution."""


class OutOfBounds(FbinerfError):
    """Sample coordinate lies outside the feature volume."""


class NotEnoughViews(FbinerfError):
    """Fewer candidate views than requested neighbors."""


class DegenerateConfiguration(FbinerfError):
    """Too few matches, or geometry that defines no essential matrix."""


# --- cost maps and optimization --------------------------------------------

class NoValidPixels(FbinerfError):
    """Every warped sample fell outside the neighbor images."""


class NonFiniteGradient(FbinerfError):
    """Gradient contains NaN or Inf."""


class Diverged(FbinerfError):
    """Cost increased for too many consecutive iterations."""


class WindowTooShort(FbinerfError):
    """Trajectory window needs at least two snapshots."""


# --- radiance field --------------------------------------------------------

class EmptySurface(FbinerfError):
    """Iso level intersects no part of the density grid."""


# --- synthetic scenes ------------------------------------------------------

class InvalidSpec(FbinerfError):
    """Scene specification fails validation."""


# --- dataset i/o -----------------------------------------------------------

class MissingCameraRecord(FbinerfError):
    """An image has no matching camera entry."""


class DimensionMismatch(FbinerfError):
    """Stored dimensions disagree with the image size."""


class CorruptDepthFile(FbinerfError):
    """Raw depth payload does not match its declared dimensions."""


class MissingPriors(FbinerfError):
    """Depth-prior initialization requested but no prior files present."""


class ConfigError(FbinerfError):
    """Run configuration contains unknown keys or malformed values."""


# --- evaluation ------------------------------------------------------------

class DegenerateAlignment(FbinerfError):
    """All camera centers coincide; similarity alignment is undefined."""
