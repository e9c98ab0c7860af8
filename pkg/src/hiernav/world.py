"""2D occupancy-grid world: map I/O, line of sight, ray-cast sensing, belief updates."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .kernels import FREE, OCCUPIED, UNKNOWN, segment_clear, visible_mask

Cell = tuple[int, int]  # (col, row)


class MapFormatError(ValueError):
    """Map text violates the map-file format."""


@dataclass(frozen=True)
class Pose:
    """Continuous position in meters; always the center of a free cell."""

    x: float
    y: float

    def distance_to(self, other: "Pose") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass
class GroundTruthMap:
    """Immutable true occupancy grid. `cells` is uint8 (H, W) of FREE/OCCUPIED."""

    cells: np.ndarray
    cell_size: float
    start: Cell
    target: Cell | None = None
    _reachable: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def blocked(self) -> np.ndarray:
        return self.cells == OCCUPIED

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height) * self.cell_size

    def in_bounds(self, col: int, row: int) -> bool:
        return 0 <= col < self.width and 0 <= row < self.height

    def center(self, cell: Cell) -> Pose:
        return Pose((cell[0] + 0.5) * self.cell_size, (cell[1] + 0.5) * self.cell_size)

    def cell_of(self, x: float, y: float) -> Cell:
        col = min(max(int(x / self.cell_size), 0), self.width - 1)
        row = min(max(int(y / self.cell_size), 0), self.height - 1)
        return col, row

    def reachable_free(self) -> np.ndarray:
        """Boolean grid of free cells 4-connected to the start cell."""
        if self._reachable is None:
            object.__setattr__(self, "_reachable", _flood_fill_4(self.cells == FREE, self.start))
        return self._reachable


@dataclass
class BeliefMap:
    """The robot's partial map. `cells` is uint8 (H, W) of FREE/OCCUPIED/UNKNOWN.

    Cells only ever transition UNKNOWN -> known, and a known label always
    matches ground truth.
    """

    cells: np.ndarray
    cell_size: float

    @classmethod
    def unknown_like(cls, truth: GroundTruthMap) -> "BeliefMap":
        return cls(np.full_like(truth.cells, UNKNOWN), truth.cell_size)

    @classmethod
    def fully_known(cls, truth: GroundTruthMap) -> "BeliefMap":
        return cls(truth.cells.copy(), truth.cell_size)

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def free_known(self) -> np.ndarray:
        return self.cells == FREE

    @property
    def blocked_conservative(self) -> np.ndarray:
        """Blocking mask for planning: occupied-known and unknown both block."""
        return self.cells != FREE

    def center(self, cell: Cell) -> Pose:
        return Pose((cell[0] + 0.5) * self.cell_size, (cell[1] + 0.5) * self.cell_size)

    def cell_of(self, x: float, y: float) -> Cell:
        col = min(max(int(x / self.cell_size), 0), self.width - 1)
        row = min(max(int(y / self.cell_size), 0), self.height - 1)
        return col, row


def _flood_fill_4(open_mask: np.ndarray, seed: Cell) -> np.ndarray:
    h, w = open_mask.shape
    reached = np.zeros((h, w), dtype=bool)
    col, row = seed
    if not open_mask[row, col]:
        return reached
    stack = [(col, row)]
    reached[row, col] = True
    while stack:
        c, r = stack.pop()
        for dc, dr in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nc, nr = c + dc, r + dr
            if 0 <= nc < w and 0 <= nr < h and open_mask[nr, nc] and not reached[nr, nc]:
                reached[nr, nc] = True
                stack.append((nc, nr))
    return reached


_CELL_SIZE_RE = re.compile(r"cell_size\s*=\s*([0-9eE+.\-]+)")


def load_map(text: str) -> GroundTruthMap:
    """Parse map-file text.

    Format: one row per line; '.' free, '#' occupied, 'S' start (free),
    'T' target (free, optional). An optional first line starting with ';'
    may carry `cell_size=<float>`.
    """
    lines = text.splitlines()
    cell_size = 1.0
    if lines and lines[0].lstrip().startswith(";"):
        m = _CELL_SIZE_RE.search(lines[0])
        if m:
            try:
                cell_size = float(m.group(1))
            except ValueError:
                raise MapFormatError(f"bad cell_size in header: {lines[0]!r}")
        if cell_size <= 0:
            raise MapFormatError(f"cell_size must be positive, got {cell_size}")
        lines = lines[1:]
    rows = [ln for ln in lines if ln.strip() != ""]
    if not rows:
        raise MapFormatError("map has no rows")
    width = len(rows[0])
    grid = np.zeros((len(rows), width), dtype=np.uint8)
    start: Cell | None = None
    target: Cell | None = None
    for r, line in enumerate(rows):
        if len(line) != width:
            raise MapFormatError(f"ragged row at row {r}: length {len(line)} != {width}")
        for c, ch in enumerate(line):
            if ch == ".":
                grid[r, c] = FREE
            elif ch == "#":
                grid[r, c] = OCCUPIED
            elif ch == "S":
                if start is not None:
                    raise MapFormatError(f"duplicate 'S' at row {r}, col {c}")
                start = (c, r)
                grid[r, c] = FREE
            elif ch == "T":
                if target is not None:
                    raise MapFormatError(f"duplicate 'T' at row {r}, col {c}")
                target = (c, r)
                grid[r, c] = FREE
            else:
                raise MapFormatError(f"unknown character {ch!r} at row {r}, col {c}")
    if start is None:
        raise MapFormatError("map has no 'S' start marker")
    world = GroundTruthMap(grid, cell_size, start, target)
    if target is not None and not world.reachable_free()[target[1], target[0]]:
        raise MapFormatError(
            f"target at col {target[0]}, row {target[1]} not reachable from start"
        )
    return world


def dump_map(world: GroundTruthMap) -> str:
    """Inverse of load_map; emits a header line carrying the cell size."""
    out = [f";cell_size={world.cell_size!r}"]
    for r in range(world.height):
        chars = []
        for c in range(world.width):
            if (c, r) == world.start:
                chars.append("S")
            elif world.target is not None and (c, r) == world.target:
                chars.append("T")
            else:
                chars.append("#" if world.cells[r, c] == OCCUPIED else ".")
        out.append("".join(chars))
    return "\n".join(out) + "\n"


def _blocking_mask(view: GroundTruthMap | BeliefMap) -> np.ndarray:
    if isinstance(view, GroundTruthMap):
        return view.blocked
    return view.blocked_conservative


def line_of_sight(a: Pose | tuple, b: Pose | tuple, view: GroundTruthMap | BeliefMap) -> bool:
    """Visibility between two points.

    The segment is discretized to the supercover of the line between the
    containing cell centers; it is clear when no strictly-intervening cell
    blocks. Against a ground-truth view occupied cells block; against a
    belief view occupied-known and unknown cells both block (conservative).
    """
    ax, ay = (a.x, a.y) if isinstance(a, Pose) else (a[0], a[1])
    bx, by = (b.x, b.y) if isinstance(b, Pose) else (b[0], b[1])
    cs = view.cell_size
    w, h = view.width, view.height
    if not (0 <= ax <= w * cs and 0 <= ay <= h * cs and 0 <= bx <= w * cs and 0 <= by <= h * cs):
        raise ValueError("line_of_sight endpoints must lie within map bounds")
    acol, arow = view.cell_of(ax, ay)
    bcol, brow = view.cell_of(bx, by)
    return bool(segment_clear(acol, arow, bcol, brow, _blocking_mask(view)))


def sense_and_update(
    pose: Pose, truth: GroundTruthMap, belief: BeliefMap, sensor_range: float = 20.0
) -> set[Cell]:
    """Reveal every cell whose center is within range and in ground-truth
    line of sight of the pose; returns exactly the newly revealed cells.
    Idempotent on repeat from the same pose."""
    pcol, prow = truth.cell_of(pose.x, pose.y)
    range_cells_sq = (sensor_range / truth.cell_size) ** 2
    vis = visible_mask(pcol, prow, range_cells_sq, truth.blocked)
    newly = vis & (belief.cells == UNKNOWN)
    belief.cells[newly] = truth.cells[newly]
    rows, cols = np.nonzero(newly)
    return {(int(c), int(r)) for c, r in zip(cols, rows)}


def coverage_fraction(belief: BeliefMap, truth: GroundTruthMap) -> float:
    """Fraction of start-reachable ground-truth free cells known free."""
    if belief.cells.shape != truth.cells.shape:
        raise ValueError("belief and truth shapes differ")
    reachable = truth.reachable_free()
    denom = int(reachable.sum())
    if denom == 0:
        return 0.0
    num = int((reachable & (belief.cells == FREE)).sum())
    return num / denom
