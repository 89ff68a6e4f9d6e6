"""poselift: unsupervised segment-wise 2D-to-3D human pose lifting with
normalizing-flow priors and lift-then-fill occlusion completion."""

__version__ = "0.1.0"

from .topology import SkeletonTopology, SEGMENT_NAMES  # noqa: F401
from .errors import (  # noqa: F401
    ConfigError,
    DataError,
    DegeneratePoseError,
    DivergenceError,
    PoseliftError,
    UnsupportedScenarioError,
)
