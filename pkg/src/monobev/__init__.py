"""monobev: monocular video to bird's-eye-view semantic maps on synthetic scenes."""

from .errors import (
    DegenerateConfigurationError,
    DegenerateViewError,
    DivergenceError,
    EmptyMaskError,
    GenerationError,
    InvalidExtentError,
    MonobevError,
    ShapeMismatchError,
    SingularWarpError,
    TrajectoryTooShortError,
    UnknownClassError,
)

__version__ = "0.1.0"
