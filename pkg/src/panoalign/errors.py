"""Exception and warning types shared across the package."""


class PanoalignError(Exception):
    """Base class for all package errors."""


class DegenerateRay(PanoalignError):
    """A ray projected onto a face whose rotated z-component is not positive.

    Cannot happen for the canonical six-face partition; indicates a broken
    camera model.
    """


class InvalidDepth(PanoalignError):
    """Depth values are non-finite or non-positive where they must be valid."""


class NonFiniteGradient(PanoalignError):
    """An analytic gradient evaluated to NaN/Inf (typically eps misconfiguration)."""


class Diverged(PanoalignError):
    """Optimization ended with a higher loss than it started with."""


class EmptyOverlap(PanoalignError):
    """No valid pixel is shared between prediction and ground truth."""


class EmptyCloud(PanoalignError):
    """A point-cloud metric was asked to operate on an empty cloud."""


class UnsupportedFormat(PanoalignError):
    """File extension or magic number does not match any supported format."""


class CorruptHeader(PanoalignError):
    """A file header could not be parsed."""


class DimensionMismatch(PanoalignError):
    """File body size or grid dimensions disagree with what was declared."""


class IoFailure(PanoalignError):
    """Generic read/write failure."""


class ParseError(PanoalignError):
    """A config/manifest document could not be parsed."""


class ValidationError(PanoalignError):
    """A config/manifest document parsed but failed validation."""


class NonUnitNormals(UserWarning):
    """Normals read from disk deviated from unit length by more than 1e-3."""
