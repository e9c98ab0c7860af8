"""Observation pipeline: viewpoint lattice, collision-free k-NN edges,
frontiers, utilities, visited flags, and beacon aggregation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import FREE, UNKNOWN, count_visible_points, greedy_cover, pairs_clear
from .world import BeliefMap, Pose

Cell = tuple[int, int]


class AlignmentError(ValueError):
    """The robot pose does not coincide with a graph node."""


@dataclass
class ViewpointGraph:
    """Collision-free k-NN graph over viewpoints in known-free space.

    Node identity is the containing cell's row-major index, so attributes
    keyed by id persist as the belief grows. Arrays are sorted by id.
    """

    ids: np.ndarray        # int64 (N,) row-major cell index, strictly increasing
    cells: np.ndarray      # int64 (N, 2) as (col, row)
    positions: np.ndarray  # float64 (N, 2) cell centers in meters
    k: int
    neighbors: list[np.ndarray] = field(default_factory=list)  # per node, sorted indices

    @property
    def n(self) -> int:
        return len(self.ids)

    def undirected_edges(self) -> list[tuple[int, int]]:
        out = []
        for i, nbrs in enumerate(self.neighbors):
            for j in nbrs:
                if i < j:
                    out.append((i, int(j)))
        return out


@dataclass
class PlanningSet:
    """Per-node attributes co-indexed with ViewpointGraph.nodes."""

    visited: np.ndarray  # bool (N,)
    utility: np.ndarray  # int64 (N,)
    beacon: np.ndarray   # bool (N,)


@dataclass
class FrontierSet:
    """Known-free cells 4-adjacent to unknown space, as cell centers."""

    cells: np.ndarray      # int64 (F, 2) as (col, row)
    positions: np.ndarray  # float64 (F, 2) meters

    @property
    def n(self) -> int:
        return len(self.cells)


@dataclass
class Observation:
    """Per-node feature block plus the index sets the decision nets consume.

    Feature columns: relative position (2), normalized utility (1), visited
    flag (1), beacon flag (1); navigation adds target offset (2) and its
    norm (1). mask[i, j] == 0 iff j is a graph neighbor of i or i == j.
    """

    features: np.ndarray         # float64 (N, F)
    mask: np.ndarray             # uint8 (N, N)
    current_index: int
    beacon_indices: np.ndarray   # int64, indices into the node arrays
    neighbor_indices: np.ndarray # int64, neighbors of the current node
    node_ids: np.ndarray         # int64 (N,)
    positions: np.ndarray        # float64 (N, 2)

    @property
    def n(self) -> int:
        return len(self.node_ids)


def _cell_id(cell: Cell, width: int) -> int:
    return cell[1] * width + cell[0]


def sample_viewpoints(belief: BeliefMap, lattice: tuple[int, int]) -> np.ndarray:
    """Uniform lattice over the map bounding box; lattice points landing in
    known-free cells become viewpoints at the containing cell's center.
    A cell yields one node no matter how many lattice points it holds.

    Returns int64 (N, 2) cells as (col, row), sorted by row-major cell id.
    """
    cols, rows = lattice
    if cols < 1 or rows < 1:
        raise ValueError("lattice dims must be >= 1")
    w, h = belief.width, belief.height
    # lattice point i sits at (i + 0.5) / cols of the map width
    ci = np.minimum((np.arange(cols) + 0.5) * w / cols, w - 1e-9).astype(np.int64)
    rj = np.minimum((np.arange(rows) + 0.5) * h / rows, h - 1e-9).astype(np.int64)
    hit = np.zeros((h, w), dtype=bool)
    hit[np.ix_(rj, ci)] = True
    keep = hit & (belief.cells == FREE)
    r_idx, c_idx = np.nonzero(keep)  # nonzero is row-major: already id-sorted
    return np.stack([c_idx, r_idx], axis=1).astype(np.int64)


def build_edges(cells: np.ndarray, belief: BeliefMap, k: int) -> list[np.ndarray]:
    """Each node proposes edges to its k nearest peers; an edge survives only
    if the conservative-belief segment between the cell centers is clear.
    The result is symmetrized, so degree may exceed k."""
    n = len(cells)
    neighbors: list[set[int]] = [set() for _ in range(n)]
    if n >= 2:
        pts = cells.astype(np.float64)
        d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        kk = min(k, n - 1)
        order = np.argsort(d2, axis=1, kind="stable")[:, :kk]
        pair_set = set()
        for i in range(n):
            for j in order[i]:
                a, b = (i, int(j)) if i < j else (int(j), i)
                pair_set.add((a, b))
        pairs = np.array(sorted(pair_set), dtype=np.int64)
        ok = pairs_clear(
            cells[pairs[:, 0], 0], cells[pairs[:, 0], 1],
            cells[pairs[:, 1], 0], cells[pairs[:, 1], 1],
            belief.blocked_conservative,
        )
        for (a, b), good in zip(pairs, ok):
            if good:
                neighbors[a].add(int(b))
                neighbors[b].add(int(a))
    return [np.array(sorted(s), dtype=np.int64) for s in neighbors]


def detect_frontiers(belief: BeliefMap) -> FrontierSet:
    """Exactly the known-free cells 4-adjacent to an unknown cell."""
    free = belief.cells == FREE
    unknown = belief.cells == UNKNOWN
    adj = np.zeros_like(free)
    adj[:, :-1] |= unknown[:, 1:]
    adj[:, 1:] |= unknown[:, :-1]
    adj[:-1, :] |= unknown[1:, :]
    adj[1:, :] |= unknown[:-1, :]
    r_idx, c_idx = np.nonzero(free & adj)
    cells = np.stack([c_idx, r_idx], axis=1).astype(np.int64)
    positions = (cells + 0.5) * belief.cell_size
    return FrontierSet(cells, positions)


def compute_utilities(
    cells: np.ndarray, frontiers: FrontierSet, belief: BeliefMap, sensor_range: float
) -> np.ndarray:
    """Utility = number of frontier points within sensor range that the node
    has a clear conservative-belief segment to."""
    if len(cells) == 0 or frontiers.n == 0:
        return np.zeros(len(cells), dtype=np.int64)
    range_cells_sq = (sensor_range / belief.cell_size) ** 2
    return count_visible_points(
        cells[:, 0], cells[:, 1],
        frontiers.cells[:, 0], frontiers.cells[:, 1],
        range_cells_sq, belief.blocked_conservative,
    )


def aggregate_beacons(
    cells: np.ndarray, candidate_indices: np.ndarray, belief: BeliefMap, d_th: float
) -> np.ndarray:
    """Greedy cover over the nonzero-utility nodes, in ascending node order.

    An uncovered node becomes a beacon and covers every candidate within
    d_th that it has a clear belief segment to (itself included); every
    candidate ends covered. Returns beacon indices (subset of candidates).
    """
    if len(candidate_indices) == 0:
        return np.zeros(0, dtype=np.int64)
    cand = cells[candidate_indices]
    d_th_cells_sq = (d_th / belief.cell_size) ** 2
    chosen = greedy_cover(
        cand[:, 0].copy(), cand[:, 1].copy(), d_th_cells_sq, belief.blocked_conservative
    )
    return candidate_indices[np.nonzero(chosen)[0]]


def assemble_observation(
    graph: ViewpointGraph,
    planning: PlanningSet,
    pose: Pose,
    map_diagonal: float,
    target: Pose | None = None,
    extra_beacon: int | None = None,
) -> Observation:
    """Build the policy input for the current step.

    `extra_beacon` injects a fallback candidate when no true beacon exists
    (late-stage navigation); it is surfaced through the beacon feature and
    index list without touching the planning set.
    """
    n = graph.n
    if n == 0:
        raise AlignmentError("cannot assemble an observation from an empty graph")
    d = np.abs(graph.positions - np.array([pose.x, pose.y])).max(axis=1)
    current = int(np.argmin(d))
    if d[current] > 1e-6:
        raise AlignmentError(f"pose ({pose.x}, {pose.y}) is not on a graph node")

    beacon_flags = planning.beacon.copy()
    if extra_beacon is not None:
        beacon_flags[extra_beacon] = True
    u_norm = max(int(planning.utility.max()) if n else 0, 1)
    rel = (graph.positions - np.array([pose.x, pose.y])) / map_diagonal
    cols = [
        rel,
        (planning.utility / u_norm)[:, None],
        planning.visited.astype(np.float64)[:, None],
        beacon_flags.astype(np.float64)[:, None],
    ]
    if target is not None:
        trel = (np.array([target.x, target.y]) - graph.positions) / map_diagonal
        cols.append(trel)
        cols.append(np.linalg.norm(trel, axis=1)[:, None])
    features = np.concatenate(cols, axis=1)

    mask = np.ones((n, n), dtype=np.uint8)
    idx = np.arange(n)
    mask[idx, idx] = 0
    for i, nbrs in enumerate(graph.neighbors):
        mask[i, nbrs] = 0

    return Observation(
        features=features,
        mask=mask,
        current_index=current,
        beacon_indices=np.nonzero(beacon_flags)[0].astype(np.int64),
        neighbor_indices=graph.neighbors[current].copy(),
        node_ids=graph.ids.copy(),
        positions=graph.positions.copy(),
    )


@dataclass
class StepContext:
    """Everything the planner derived from the belief at one decision step."""

    graph: ViewpointGraph
    planning: PlanningSet
    frontiers: FrontierSet
    observation: Observation


def build_step_context(
    belief: BeliefMap,
    pose: Pose,
    visited_ids: set[int],
    *,
    lattice: tuple[int, int],
    k: int,
    sensor_range: float,
    d_th: float,
    map_diagonal: float,
    target: Pose | None = None,
) -> StepContext:
    """Run the full per-step pipeline from belief to observation.

    The pose's cell always contributes a node even when no lattice point
    falls inside it, so the robot is guaranteed to sit on the graph. In
    navigation mode with no beacons left, the node nearest the target is
    injected as a fallback candidate.
    """
    cells = sample_viewpoints(belief, lattice)
    pose_cell = belief.cell_of(pose.x, pose.y)
    ids = cells[:, 1] * belief.width + cells[:, 0]
    pose_id = pose_cell[1] * belief.width + pose_cell[0]
    if pose_id not in set(int(i) for i in ids):
        cells = np.concatenate([cells, np.array([[pose_cell[0], pose_cell[1]]], dtype=np.int64)])
        ids = cells[:, 1] * belief.width + cells[:, 0]
        order = np.argsort(ids, kind="stable")
        cells = cells[order]
        ids = ids[order]
    positions = (cells + 0.5) * belief.cell_size
    neighbors = build_edges(cells, belief, k)
    graph = ViewpointGraph(ids.astype(np.int64), cells, positions, k, neighbors)

    frontiers = detect_frontiers(belief)
    utility = compute_utilities(cells, frontiers, belief, sensor_range)
    candidates = np.nonzero(utility > 0)[0].astype(np.int64)
    beacon_idx = aggregate_beacons(cells, candidates, belief, d_th)
    beacon = np.zeros(len(cells), dtype=bool)
    beacon[beacon_idx] = True
    visited = np.array([int(i) in visited_ids for i in ids], dtype=bool)
    planning = PlanningSet(visited=visited, utility=utility, beacon=beacon)

    extra = None
    if target is not None and len(beacon_idx) == 0:
        tpos = np.array([target.x, target.y])
        dist = np.linalg.norm(positions - tpos, axis=1)
        extra = int(np.argmin(dist))
    obs = assemble_observation(
        graph, planning, pose, map_diagonal, target=target, extra_beacon=extra
    )
    return StepContext(graph=graph, planning=planning, frontiers=frontiers, observation=obs)
