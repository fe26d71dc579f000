"""Exception types shared across the pipeline."""


class MonobevError(Exception):
    """Base class for all library-specific errors."""


class DegenerateViewError(MonobevError):
    """The ground plane projects to a line (camera centre lies on the plane)."""


class DegenerateConfigurationError(MonobevError):
    """Correspondences do not determine a homography (e.g. three collinear points)."""


class InvalidExtentError(MonobevError):
    """Grid extents are empty, inverted, or the resolution is not positive."""


class SingularWarpError(MonobevError):
    """Warp matrix is numerically singular."""


class ShapeMismatchError(MonobevError):
    """Array dimensions disagree with the lattice or with each other."""


class EmptyMaskError(MonobevError):
    """A loss or statistic was requested over a mask with no selected cells."""


class DivergenceError(MonobevError):
    """Training produced a non-finite loss."""


class GenerationError(MonobevError):
    """Procedural scene generation could not satisfy its own constraints."""


class TrajectoryTooShortError(MonobevError):
    """The requested frame sampling runs off the end of the ego trajectory."""


class UnknownClassError(MonobevError):
    """A requested class name or index is not part of the label layout."""
