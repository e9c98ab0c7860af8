import numpy as np
import pytest

from hiernav.world import BeliefMap, GroundTruthMap, load_map
from hiernav.kernels import FREE, OCCUPIED, UNKNOWN


def make_world(text: str) -> GroundTruthMap:
    """Build a map from inline ASCII, stripping indentation."""
    lines = [ln.strip() for ln in text.strip().splitlines()]
    return load_map("\n".join(lines))


def known_belief(world: GroundTruthMap) -> BeliefMap:
    return BeliefMap.fully_known(world)


def random_world(rng: np.random.Generator, w: int, h: int, p_occ: float = 0.25) -> GroundTruthMap:
    """Random occupancy grid with a start in the largest free region."""
    from hiernav.world import _flood_fill_4

    while True:
        grid = (rng.random((h, w)) < p_occ).astype(np.uint8)
        free_rows, free_cols = np.nonzero(grid == FREE)
        if len(free_rows) == 0:
            continue
        i = int(rng.integers(len(free_rows)))
        start = (int(free_cols[i]), int(free_rows[i]))
        world = GroundTruthMap(grid, 1.0, start, None)
        if world.reachable_free().sum() >= 3:
            return world


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
