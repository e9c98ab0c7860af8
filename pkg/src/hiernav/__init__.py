"""Hierarchical beacon/waypoint planning toolkit for grid exploration and
navigation: simulator, belief-graph observations, attention policy/critic
networks, soft actor-critic training, classical baselines, benchmarks."""

__version__ = "0.1.0"

from .world import (
    BeliefMap,
    GroundTruthMap,
    MapFormatError,
    Pose,
    coverage_fraction,
    line_of_sight,
    load_map,
    sense_and_update,
)

__all__ = [
    "BeliefMap",
    "GroundTruthMap",
    "MapFormatError",
    "Pose",
    "coverage_fraction",
    "line_of_sight",
    "load_map",
    "sense_and_update",
    "__version__",
]
