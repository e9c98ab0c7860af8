"""Procedural map generation: rooms, cave, and corridor styles.

Every generated map is fully 4-connected among free cells, carries a start,
and (when requested) a target at least 60% of the map diagonal away.
"""
from __future__ import annotations

import math

import numpy as np

from .kernels import FREE, OCCUPIED
from .world import GroundTruthMap, _flood_fill_4, dump_map

STYLES = ("rooms", "cave", "corridor")


def _largest_component(free: np.ndarray) -> np.ndarray:
    """Keep only the biggest 4-connected free component."""
    h, w = free.shape
    seen = np.zeros((h, w), dtype=bool)
    best: np.ndarray | None = None
    best_size = 0
    for r in range(h):
        for c in range(w):
            if free[r, c] and not seen[r, c]:
                comp = _flood_fill_4(free, (c, r))
                seen |= comp
                size = int(comp.sum())
                if size > best_size:
                    best_size = size
                    best = comp
    return best if best is not None else np.zeros((h, w), dtype=bool)


def _rooms(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    """Floor plan: a grid of rooms separated by walls, connected by narrow
    doors along a spanning tree plus a few extras, with scattered clutter."""
    grid = np.full((h, w), FREE, dtype=np.uint8)
    grid[0, :] = grid[-1, :] = OCCUPIED
    grid[:, 0] = grid[:, -1] = OCCUPIED

    def wall_lines(n):
        lines = []
        pos = int(rng.integers(4, 8))
        while pos < n - 4:
            lines.append(pos)
            pos += int(rng.integers(5, 9))
        return lines

    wall_cols = wall_lines(w)
    wall_rows = wall_lines(h)
    for c in wall_cols:
        grid[:, c] = OCCUPIED
    for r in wall_rows:
        grid[r, :] = OCCUPIED

    # clutter inside rooms, placed before doors so doorways stay open
    interior = grid == FREE
    free_rows, free_cols = np.nonzero(interior)
    for _ in range((w * h) // 80):
        i = int(rng.integers(len(free_rows)))
        grid[free_rows[i], free_cols[i]] = OCCUPIED

    col_edges = [0] + wall_cols + [w - 1]
    row_edges = [0] + wall_rows + [h - 1]
    n_rc = len(col_edges) - 1
    n_rr = len(row_edges) - 1

    def door_between(a, b):
        """Open 1-2 cells on the shared wall of room-grid cells a and b."""
        (ac, ar), (bc, br) = a, b
        if ac != bc:  # vertical wall between horizontally adjacent rooms
            wall_c = col_edges[max(ac, bc)]
            lo, hi = row_edges[ar] + 1, row_edges[ar + 1] - 1
            if hi < lo:
                return
            pos = int(rng.integers(lo, hi + 1))
            grid[pos, wall_c] = FREE
            if rng.random() < 0.3 and pos + 1 <= hi:
                grid[pos + 1, wall_c] = FREE
        else:
            wall_r = row_edges[max(ar, br)]
            lo, hi = col_edges[ac] + 1, col_edges[ac + 1] - 1
            if hi < lo:
                return
            pos = int(rng.integers(lo, hi + 1))
            grid[wall_r, pos] = FREE
            if rng.random() < 0.3 and pos + 1 <= hi:
                grid[wall_r, pos + 1] = FREE

    # spanning tree over the room grid, then extra doors for loops
    rooms = [(c, r) for r in range(n_rr) for c in range(n_rc)]
    seen = {rooms[int(rng.integers(len(rooms)))]}
    frontier_edges = []

    def add_edges(room):
        c, r = room
        for dc, dr in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nb = (c + dc, r + dr)
            if 0 <= nb[0] < n_rc and 0 <= nb[1] < n_rr and nb not in seen:
                frontier_edges.append((room, nb))

    add_edges(next(iter(seen)))
    while frontier_edges:
        idx = int(rng.integers(len(frontier_edges)))
        a, b = frontier_edges.pop(idx)
        if b in seen:
            continue
        seen.add(b)
        door_between(a, b)
        add_edges(b)
    for r in range(n_rr):
        for c in range(n_rc):
            if c + 1 < n_rc and rng.random() < 0.25:
                door_between((c, r), (c + 1, r))
            if r + 1 < n_rr and rng.random() < 0.25:
                door_between((c, r), (c, r + 1))
    return grid


def _cave(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    wall = rng.random((h, w)) < 0.42
    wall[0, :] = wall[-1, :] = wall[:, 0] = wall[:, -1] = True
    for _ in range(4):
        padded = np.pad(wall, 1, constant_values=True)
        count = sum(
            padded[1 + dr : h + 1 + dr, 1 + dc : w + 1 + dc]
            for dr in (-1, 0, 1)
            for dc in (-1, 0, 1)
        )
        wall = count >= 5
        wall[0, :] = wall[-1, :] = wall[:, 0] = wall[:, -1] = True
    return np.where(wall, OCCUPIED, FREE).astype(np.uint8)


def _corridor(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    """Maze carved on an odd lattice by iterative backtracking, then braided
    so corridors loop instead of dead-ending everywhere."""
    grid = np.full((h, w), OCCUPIED, dtype=np.uint8)
    cols = (w - 1) // 2
    rows = (h - 1) // 2
    visited = np.zeros((rows, cols), dtype=bool)
    start = (int(rng.integers(cols)), int(rng.integers(rows)))
    stack = [start]
    visited[start[1], start[0]] = True
    grid[2 * start[1] + 1, 2 * start[0] + 1] = FREE
    while stack:
        c, r = stack[-1]
        options = []
        for dc, dr in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nc, nr = c + dc, r + dr
            if 0 <= nc < cols and 0 <= nr < rows and not visited[nr, nc]:
                options.append((nc, nr))
        if not options:
            stack.pop()
            continue
        nc, nr = options[int(rng.integers(len(options)))]
        visited[nr, nc] = True
        grid[2 * nr + 1, 2 * nc + 1] = FREE
        grid[r + nr + 1, c + nc + 1] = FREE
        stack.append((nc, nr))
    # braid: open a fraction of the remaining interior walls
    for r in range(1, h - 1):
        for c in range(1, w - 1):
            if grid[r, c] == OCCUPIED and rng.random() < 0.15:
                if (grid[r, c - 1] == FREE and grid[r, c + 1] == FREE) or (
                    grid[r - 1, c] == FREE and grid[r + 1, c] == FREE
                ):
                    grid[r, c] = FREE
    return grid


_BUILDERS = {"rooms": _rooms, "cave": _cave, "corridor": _corridor}


def generate_map(
    seed: int,
    style: str = "rooms",
    dims: tuple[int, int] = (30, 30),
    cell_size: float = 1.0,
    with_target: bool = False,
) -> GroundTruthMap:
    """One connected map with a seeded start (and target). Identical seeds
    produce identical maps."""
    if style not in _BUILDERS:
        raise ValueError(f"unknown style {style!r}; expected one of {STYLES}")
    w, h = dims
    if w < 10 or h < 10:
        raise ValueError("map dims must be at least 10x10")
    for attempt in range(64):
        rng = np.random.default_rng([seed, attempt])
        grid = _BUILDERS[style](rng, w, h)
        comp = _largest_component(grid == FREE)
        n_free = int(comp.sum())
        if n_free < (w * h) // 5:
            continue
        grid = np.where(comp, FREE, OCCUPIED).astype(np.uint8)
        # keep rooms-style maps inside their occupancy band
        if style == "rooms" and float((grid == OCCUPIED).mean()) > 0.55:
            continue
        free_rows, free_cols = np.nonzero(comp)
        order = rng.permutation(n_free)
        if not with_target:
            i = int(order[0])
            start = (int(free_cols[i]), int(free_rows[i]))
            return GroundTruthMap(grid, cell_size, start, None)
        min_d = 0.6 * math.hypot(w, h)
        for i in order[: min(n_free, 128)]:
            start = (int(free_cols[i]), int(free_rows[i]))
            dx = free_cols - start[0]
            dy = free_rows - start[1]
            far = np.nonzero(dx * dx + dy * dy >= min_d * min_d)[0]
            if len(far):
                j = int(far[int(rng.integers(len(far)))])
                target = (int(free_cols[j]), int(free_rows[j]))
                return GroundTruthMap(grid, cell_size, start, target)
    raise RuntimeError(f"map generation failed for seed={seed} style={style} dims={dims}")


def generate_maps(
    seed: int,
    count: int,
    style: str = "rooms",
    dims: tuple[int, int] = (30, 30),
    cell_size: float = 1.0,
    with_target: bool = False,
) -> list[str]:
    """Map-file texts for `count` seeded maps."""
    return [
        dump_map(generate_map(seed + i, style, dims, cell_size, with_target))
        for i in range(count)
    ]
