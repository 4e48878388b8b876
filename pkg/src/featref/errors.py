"""Exception hierarchy shared across the package."""


class FeatrefError(Exception):
    """Base class for all errors raised by this package."""


# --- geometry ---------------------------------------------------------------

class CheiralityViolation(FeatrefError):
    """A point projects with non-positive depth."""


class DegenerateGeometry(FeatrefError):
    """Triangulation input is underdetermined or numerically ambiguous."""


# --- features ---------------------------------------------------------------

class KeypointOutOfBounds(FeatrefError):
    """Keypoint lies outside the image it claims to belong to."""


class OutOfPatch(FeatrefError):
    """Subpixel lookup left the region where bicubic support is available."""


class MissingPatch(FeatrefError):
    """A required feature patch is absent from the patch set."""


# --- matching ---------------------------------------------------------------

class SelfMatch(FeatrefError):
    """Both endpoints of a match are the same keypoint."""


class TrackTooSmall(FeatrefError):
    """Track has fewer than two members."""


class EmptyTrack(FeatrefError):
    """Track carries no observations."""


# --- optimization -----------------------------------------------------------

class EmptyInput(FeatrefError):
    """An aggregate was requested over an empty collection."""


class NumericalFailure(FeatrefError):
    """The damped normal equations stayed singular up to the damping cap."""


class SingularPointBlock(FeatrefError):
    """A point's Hessian block could not be factorized even after regularization."""


class GaugeUnderconstrained(FeatrefError):
    """All poses free with no gauge rule to anchor the solution."""


class TooFewInliers(FeatrefError):
    """Pose refinement needs at least four 2D-3D correspondences."""


# --- io ---------------------------------------------------------------------

class ParseError(FeatrefError):
    """Malformed text input; message carries file and line context."""


class UnknownCameraModel(ParseError):
    """Camera model string not supported."""


class DanglingReference(ParseError):
    """A cross-reference in a model bundle does not resolve."""


class BadMagic(FeatrefError):
    """Binary file does not start with the expected magic bytes."""


class TruncatedPayload(FeatrefError):
    """Binary payload shorter than the header promises."""


class VersionUnsupported(FeatrefError):
    """Binary format version is not supported."""


class NonPositiveConfidence(ParseError):
    """Match confidence must be strictly positive."""


class IdMismatch(FeatrefError):
    """Refined and ground-truth reconstructions disagree on ids."""


class ConfigInvalid(FeatrefError):
    """Synthetic-scene configuration fails validation."""
