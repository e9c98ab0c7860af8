"""Compiled grid kernels: supercover segment traversal, visibility, sensing.

All kernels work on integer cell coordinates; callers convert metric points
to cells first. Grids are uint8 arrays indexed [row, col].
"""
from __future__ import annotations

import numpy as np
from numba import njit

# Cell codes. Ground-truth grids use FREE/OCCUPIED; belief grids add UNKNOWN.
FREE = 0
OCCUPIED = 1
UNKNOWN = 2


@njit(cache=True)
def segment_clear(ax, ay, bx, by, blocked):
    """True iff no blocked cell lies strictly between cell centers a and b.

    Walks every cell the segment touches (supercover): a crossing exactly
    through a cell corner counts both side cells, so a diagonal gap between
    two blocked cells does not admit the segment. Endpoint cells are never
    tested.
    """
    dx = bx - ax
    dy = by - ay
    xstep = 1 if dx > 0 else -1
    ystep = 1 if dy > 0 else -1
    if dx < 0:
        dx = -dx
    if dy < 0:
        dy = -dy
    ddx = 2 * dx
    ddy = 2 * dy
    x = ax
    y = ay
    if ddx >= ddy:
        error = dx
        errorprev = dx
        for _ in range(dx):
            x += xstep
            error += ddy
            if error > ddx:
                y += ystep
                error -= ddx
                s = error + errorprev
                if s < ddx:
                    if blocked[y - ystep, x]:
                        return False
                elif s > ddx:
                    if blocked[y, x - xstep]:
                        return False
                else:
                    # exact corner crossing: both side cells must be clear
                    if blocked[y - ystep, x] or blocked[y, x - xstep]:
                        return False
            if (x != bx or y != by) and blocked[y, x]:
                return False
            errorprev = error
    else:
        error = dy
        errorprev = dy
        for _ in range(dy):
            y += ystep
            error += ddx
            if error > ddy:
                x += xstep
                error -= ddy
                s = error + errorprev
                if s < ddy:
                    if blocked[y, x - xstep]:
                        return False
                elif s > ddy:
                    if blocked[y - ystep, x]:
                        return False
                else:
                    if blocked[y, x - xstep] or blocked[y - ystep, x]:
                        return False
            if (x != bx or y != by) and blocked[y, x]:
                return False
            errorprev = error
    return True


@njit(cache=True)
def pairs_clear(acols, arows, bcols, brows, blocked):
    """Vectorized segment_clear over parallel arrays of cell pairs."""
    n = acols.shape[0]
    out = np.empty(n, dtype=np.bool_)
    for i in range(n):
        out[i] = segment_clear(acols[i], arows[i], bcols[i], brows[i], blocked)
    return out


@njit(cache=True)
def visible_mask(pcol, prow, range_cells_sq, blocked):
    """Boolean grid of cells whose center is within range and unoccluded
    from the center of (pcol, prow). The origin cell is always visible."""
    h, w = blocked.shape
    out = np.zeros((h, w), dtype=np.bool_)
    r = int(np.sqrt(range_cells_sq)) + 1
    c0 = max(0, pcol - r)
    c1 = min(w - 1, pcol + r)
    r0 = max(0, prow - r)
    r1 = min(h - 1, prow + r)
    for row in range(r0, r1 + 1):
        for col in range(c0, c1 + 1):
            d2 = (col - pcol) ** 2 + (row - prow) ** 2
            if d2 <= range_cells_sq and segment_clear(pcol, prow, col, row, blocked):
                out[row, col] = True
    return out


@njit(cache=True)
def count_visible_points(node_cols, node_rows, pt_cols, pt_rows, range_cells_sq, blocked):
    """Per-node count of target points within range and with a clear segment."""
    n = node_cols.shape[0]
    m = pt_cols.shape[0]
    out = np.zeros(n, dtype=np.int64)
    for i in range(n):
        c = node_cols[i]
        r = node_rows[i]
        total = 0
        for j in range(m):
            d2 = (pt_cols[j] - c) ** 2 + (pt_rows[j] - r) ** 2
            if d2 <= range_cells_sq and segment_clear(c, r, pt_cols[j], pt_rows[j], blocked):
                total += 1
        out[i] = total
    return out


@njit(cache=True)
def greedy_cover(cols, rows, d_th_cells_sq, blocked):
    """Greedy cover pass over nodes in the given order.

    An uncovered node becomes a representative and covers every node within
    the threshold radius that it has a clear segment to (itself included).
    Returns a boolean flag per node marking the representatives.
    """
    n = cols.shape[0]
    chosen = np.zeros(n, dtype=np.bool_)
    covered = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        if covered[i]:
            continue
        chosen[i] = True
        for j in range(n):
            if covered[j]:
                continue
            d2 = (cols[j] - cols[i]) ** 2 + (rows[j] - rows[i]) ** 2
            if d2 <= d_th_cells_sq and segment_clear(cols[i], rows[i], cols[j], rows[j], blocked):
                covered[j] = True
    return chosen
