"""Classical planners: optimal grid A*, an optimistic replanning navigator,
and nearest-frontier exploration."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .graph import detect_frontiers
from .kernels import FREE, OCCUPIED, UNKNOWN
from .world import BeliefMap, GroundTruthMap, Pose, sense_and_update

Cell = tuple[int, int]

_SQRT2 = math.sqrt(2.0)
# 8-connected moves; diagonals carry the two orthogonal side cells that must
# also be open (otherwise the move would cut a corner the supercover blocks)
_MOVES = (
    (1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
    (1, 1, _SQRT2), (1, -1, _SQRT2), (-1, 1, _SQRT2), (-1, -1, _SQRT2),
)


class NoPathError(Exception):
    """Goal unreachable on the given map view."""


@dataclass
class GridPath:
    cells: list[Cell]
    cost: float  # meters


def traversable_truth(truth: GroundTruthMap) -> np.ndarray:
    return truth.cells == FREE


def traversable_conservative(belief: BeliefMap) -> np.ndarray:
    """Planning on what is known free; unknown blocks."""
    return belief.cells == FREE


def traversable_optimistic(belief: BeliefMap) -> np.ndarray:
    """Unknown treated as traversable; only known-occupied blocks."""
    return belief.cells != OCCUPIED


def _move_ok(open_mask: np.ndarray, c: int, r: int, dc: int, dr: int) -> bool:
    h, w = open_mask.shape
    nc, nr = c + dc, r + dr
    if not (0 <= nc < w and 0 <= nr < h) or not open_mask[nr, nc]:
        return False
    if dc != 0 and dr != 0:
        # both side cells must be open; matches the supercover corner rule
        if not open_mask[r + dr, c] or not open_mask[r, c + dc]:
            return False
    return True


def _octile(a: Cell, b: Cell) -> float:
    dx, dy = abs(a[0] - b[0]), abs(a[1] - b[1])
    return max(dx, dy) + (_SQRT2 - 1.0) * min(dx, dy)


def astar(start: Cell, goal: Cell, open_mask: np.ndarray, cell_size: float = 1.0) -> GridPath:
    """Cost-minimal 8-connected path under the octile heuristic.

    Deterministic tie-break by (f, h, cell index). Diagonal steps cost
    sqrt(2) * cell_size and require both adjacent orthogonal cells open.
    Raises NoPathError when the goal cannot be reached.
    """
    h_grid, w = open_mask.shape
    if not open_mask[start[1], start[0]] or not open_mask[goal[1], goal[0]]:
        raise NoPathError(f"start or goal not traversable: {start} -> {goal}")
    g = {start: 0.0}
    parent: dict[Cell, Cell] = {}
    h0 = _octile(start, goal)
    heap = [(h0, h0, start[1] * w + start[0], start)]
    closed: set[Cell] = set()
    while heap:
        f, _, _, cell = heapq.heappop(heap)
        if cell in closed:
            continue
        if cell == goal:
            path = [cell]
            while cell in parent:
                cell = parent[cell]
                path.append(cell)
            path.reverse()
            return GridPath(path, g[goal] * cell_size)
        closed.add(cell)
        c, r = cell
        for dc, dr, step in _MOVES:
            if not _move_ok(open_mask, c, r, dc, dr):
                continue
            nxt = (c + dc, r + dr)
            if nxt in closed:
                continue
            ng = g[cell] + step
            if ng < g.get(nxt, math.inf):
                g[nxt] = ng
                parent[nxt] = cell
                nh = _octile(nxt, goal)
                heapq.heappush(heap, (ng + nh, nh, nxt[1] * w + nxt[0], nxt))
    raise NoPathError(f"no path from {start} to {goal}")


def dijkstra_field(sources: list[Cell], open_mask: np.ndarray, cell_size: float = 1.0) -> np.ndarray:
    """Geodesic distance (meters) from the nearest source to every open cell;
    inf where unreachable."""
    h, w = open_mask.shape
    dist = np.full((h, w), np.inf)
    heap = []
    for c, r in sources:
        if open_mask[r, c]:
            dist[r, c] = 0.0
            heap.append((0.0, r * w + c, (c, r)))
    heapq.heapify(heap)
    while heap:
        d, _, (c, r) = heapq.heappop(heap)
        if d > dist[r, c]:
            continue
        for dc, dr, step in _MOVES:
            if not _move_ok(open_mask, c, r, dc, dr):
                continue
            nc, nr = c + dc, r + dr
            nd = d + step
            if nd < dist[nr, nc]:
                dist[nr, nc] = nd
                heapq.heappush(heap, (nd, nr * w + nc, (nc, nr)))
    return dist * cell_size


@dataclass
class ReplanResult:
    trajectory: list[Cell]
    distance: float  # meters
    steps: int       # cell moves
    replans: int     # replans forced by obstacles appearing on the plan
    success: bool


def _path_invalidated(path: list[Cell], pos: int, at: Cell, open_mask: np.ndarray) -> bool:
    """True when an occupied cell appeared on the remaining plan or a move on
    it (including the immediate one from `at`) no longer satisfies the
    movement rule."""
    prev = at
    for i in range(pos, len(path)):
        c, r = path[i]
        dc, dr = c - prev[0], r - prev[1]
        if not _move_ok(open_mask, prev[0], prev[1], dc, dr):
            return True
        prev = (c, r)
    return False


def replan_navigate(
    truth: GroundTruthMap,
    start: Cell,
    target: Cell,
    sensor_range: float = 20.0,
    belief: BeliefMap | None = None,
    max_moves: int | None = None,
) -> ReplanResult:
    """Navigate by repeatedly planning on the belief with unknown treated as
    free, advancing one cell at a time and sensing on arrival. Replans when
    newly known obstacles invalidate the remaining plan. Raises NoPathError
    when the target is provably unreachable."""
    if belief is None:
        belief = BeliefMap.unknown_like(truth)
    pos_cell = start
    sense_and_update(truth.center(pos_cell), truth, belief, sensor_range)
    trajectory = [pos_cell]
    distance = 0.0
    moves = 0
    replans = -1  # first plan is free
    cap = max_moves if max_moves is not None else truth.width * truth.height * 8
    path: list[Cell] | None = None
    path_pos = 0
    while pos_cell != target:
        if path is None or path_pos >= len(path) or _path_invalidated(
            path, path_pos, pos_cell, traversable_optimistic(belief)
        ):
            path = astar(pos_cell, target, traversable_optimistic(belief)).cells
            path_pos = 1
            replans += 1
        nxt = path[path_pos]
        path_pos += 1
        step_len = math.hypot(nxt[0] - pos_cell[0], nxt[1] - pos_cell[1]) * truth.cell_size
        pos_cell = nxt
        distance += step_len
        moves += 1
        trajectory.append(pos_cell)
        sense_and_update(truth.center(pos_cell), truth, belief, sensor_range)
        if moves > cap:
            raise RuntimeError("replan_navigate exceeded its move cap")
    return ReplanResult(trajectory, distance, moves, max(replans, 0), True)


def nearest_frontier_step(belief: BeliefMap, pose_cell: Cell) -> Cell | None:
    """First step of the cheapest known-space path to a frontier; None when
    no frontier remains. Equidistant frontiers break ties by cell index."""
    frontiers = detect_frontiers(belief)
    if frontiers.n == 0:
        return None
    open_mask = traversable_conservative(belief)
    h, w = open_mask.shape
    dist = np.full((h, w), np.inf)
    parent: dict[Cell, Cell] = {}
    dist[pose_cell[1], pose_cell[0]] = 0.0
    heap = [(0.0, pose_cell[1] * w + pose_cell[0], pose_cell)]
    while heap:
        d, _, (c, r) = heapq.heappop(heap)
        if d > dist[r, c]:
            continue
        for dc, dr, step in _MOVES:
            if not _move_ok(open_mask, c, r, dc, dr):
                continue
            nc, nr = c + dc, r + dr
            nd = d + step
            if nd < dist[nr, nc]:
                dist[nr, nc] = nd
                parent[(nc, nr)] = (c, r)
                heapq.heappush(heap, (nd, nr * w + nc, (nc, nr)))
    best: Cell | None = None
    best_key = (math.inf, 0)
    for c, r in frontiers.cells:
        c, r = int(c), int(r)
        d = dist[r, c]
        if not math.isinf(d):
            key = (d, r * w + c)
            if key < best_key:
                best_key = key
                best = (c, r)
    # the pose cell itself is never a frontier after sensing (its orthogonal
    # neighbors are always revealed), so a reachable frontier yields a move
    if best is None or best == pose_cell:
        return None
    cell = best
    while parent.get(cell) != pose_cell and cell in parent:
        cell = parent[cell]
    return cell
