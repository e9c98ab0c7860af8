import math

import numpy as np
import pytest

from hiernav.kernels import FREE, OCCUPIED
from hiernav.mapgen import STYLES, generate_map, generate_maps
from hiernav.world import load_map, _flood_fill_4


class TestGenerateMap:
    @pytest.mark.parametrize("style", STYLES)
    @pytest.mark.parametrize("seed", [0, 7, 99])
    def test_free_space_fully_connected(self, style, seed):
        world = generate_map(seed, style, (20, 20))
        free = world.cells == FREE
        comp = _flood_fill_4(free, world.start)
        assert (comp == free).all()

    @pytest.mark.parametrize("style", STYLES)
    def test_same_seed_identical_bytes(self, style):
        from hiernav.world import dump_map

        a = dump_map(generate_map(5, style, (18, 14), with_target=True))
        b = dump_map(generate_map(5, style, (18, 14), with_target=True))
        assert a == b

    def test_different_seeds_differ(self):
        from hiernav.world import dump_map

        a = dump_map(generate_map(1, "rooms", (20, 20)))
        b = dump_map(generate_map(2, "rooms", (20, 20)))
        assert a != b

    def test_rooms_occupancy_fraction_band(self):
        fracs = []
        for seed in range(100):
            world = generate_map(seed, "rooms", (30, 30))
            fracs.append(float((world.cells == OCCUPIED).mean()))
        assert min(fracs) >= 0.15
        assert max(fracs) <= 0.55

    def test_navigation_target_far_from_start(self):
        for seed in range(20):
            world = generate_map(seed, "rooms", (24, 24), with_target=True)
            assert world.target is not None
            d = math.hypot(world.target[0] - world.start[0], world.target[1] - world.start[1])
            assert d >= 0.6 * math.hypot(24, 24)

    def test_small_dims_rejected(self):
        with pytest.raises(ValueError):
            generate_map(0, "rooms", (8, 12))

    def test_unknown_style_rejected(self):
        with pytest.raises(ValueError):
            generate_map(0, "swamp", (20, 20))

    def test_generated_text_round_trips(self):
        texts = generate_maps(3, 4, "cave", (16, 16), cell_size=0.5, with_target=False)
        assert len(texts) == 4
        for t in texts:
            world = load_map(t)
            assert world.cell_size == 0.5
            assert world.cells[world.start[1], world.start[0]] == FREE
