"""Scale-consistent 360-degree depth from per-face cubemap predictions.

Merges six independently predicted perspective depth/normal maps into
equirectangular space and jointly refines per-pixel depth, per-pixel
normals and six per-face scale factors under a graph-based
planar-consistency objective.
"""

from . import geometry, graphopt, io, metrics, oracle, resample
from .errors import PanoalignError

__all__ = [
    "geometry",
    "resample",
    "graphopt",
    "oracle",
    "metrics",
    "io",
    "PanoalignError",
]

__version__ = "0.1.0"
