"""Byte-deterministic SVG rendering of episode trajectories over the belief."""
from __future__ import annotations

import json

import numpy as np

_UNKNOWN_FILL = "#b0b0b0"
_FREE_FILL = "#ffffff"
_OCC_FILL = "#3d3d3d"
_TRAJ_STROKE = "#e53935"
_BEACON_FILL = "#1e88e5"
_START_FILL = "#43a047"
_TARGET_STROKE = "#fb8c00"


def _f(v: float) -> str:
    return f"{v:.3f}"


def emit_plot(
    belief_rows: list[str],
    cell_size: float,
    start: tuple[float, float],
    target: tuple[float, float] | None,
    trajectory: list[tuple[float, float]],
    beacons: list[tuple[float, float]],
) -> str:
    """SVG with the occupancy raster, trajectory polyline, beacon markers and
    start/target glyphs. Identical inputs produce identical bytes.

    belief_rows use 'f' (known free), 'o' (known occupied), 'u' (unknown),
    one string per grid row.
    """
    h = len(belief_rows)
    w = len(belief_rows[0]) if h else 0
    cs = cell_size
    width_m, height_m = w * cs, h * cs
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {_f(width_m)} {_f(height_m)}" '
        f'width="{w * 12}" height="{h * 12}">',
        f'<rect x="0" y="0" width="{_f(width_m)}" height="{_f(height_m)}" fill="{_UNKNOWN_FILL}"/>',
    ]
    # known cells as per-row runs to keep the file small
    for r, row in enumerate(belief_rows):
        c = 0
        while c < w:
            ch = row[c]
            c0 = c
            while c < w and row[c] == ch:
                c += 1
            if ch == "u":
                continue
            fill = _FREE_FILL if ch == "f" else _OCC_FILL
            parts.append(
                f'<rect x="{_f(c0 * cs)}" y="{_f(r * cs)}" width="{_f((c - c0) * cs)}" '
                f'height="{_f(cs)}" fill="{fill}"/>'
            )
    for bx, by in beacons:
        parts.append(
            f'<circle cx="{_f(bx)}" cy="{_f(by)}" r="{_f(0.3 * cs)}" fill="{_BEACON_FILL}" '
            f'fill-opacity="0.6"/>'
        )
    if len(trajectory) >= 2:
        points = " ".join(f"{_f(x)},{_f(y)}" for x, y in trajectory)
        parts.append(
            f'<polyline points="{points}" fill="none" stroke="{_TRAJ_STROKE}" '
            f'stroke-width="{_f(0.15 * cs)}" stroke-linejoin="round"/>'
        )
    sx, sy = start
    parts.append(f'<circle cx="{_f(sx)}" cy="{_f(sy)}" r="{_f(0.4 * cs)}" fill="{_START_FILL}"/>')
    if target is not None:
        tx, ty = target
        d = 0.4 * cs
        parts.append(
            f'<path d="M {_f(tx - d)} {_f(ty - d)} L {_f(tx + d)} {_f(ty + d)} '
            f'M {_f(tx - d)} {_f(ty + d)} L {_f(tx + d)} {_f(ty - d)}" '
            f'stroke="{_TARGET_STROKE}" stroke-width="{_f(0.2 * cs)}"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def plot_from_result(truth, result) -> str:
    """Render an EpisodeResult directly."""
    from .runner import _BELIEF_CHARS

    belief_rows = ["".join(_BELIEF_CHARS[int(v)] for v in row) for row in result.belief.cells]
    trajectory = [result.start] + [rec.pose for rec in result.records]
    beacons = _unique_beacons([rec.beacon for rec in result.records if rec.beacon])
    return emit_plot(
        belief_rows, truth.cell_size, result.start, result.target, trajectory, beacons
    )


def plot_from_dump(dump_path) -> str:
    """Render from a JSON-lines episode dump (see the runner's dump schema)."""
    steps = []
    summary = None
    with open(dump_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if obj["type"] == "step":
                steps.append(obj)
            elif obj["type"] == "summary":
                summary = obj
    if summary is None:
        raise ValueError(f"dump {dump_path} has no summary line")
    trajectory = [tuple(summary["start"])] + [tuple(s["pose"]) for s in steps]
    beacons = _unique_beacons([tuple(s["beacon"]) for s in steps if s.get("beacon")])
    target = tuple(summary["target"]) if summary.get("target") else None
    return emit_plot(
        summary["belief"], summary["cell_size"], tuple(summary["start"]), target,
        trajectory, beacons,
    )


def _unique_beacons(beacons: list[tuple[float, float]]) -> list[tuple[float, float]]:
    seen = set()
    out = []
    for b in beacons:
        key = (round(b[0], 6), round(b[1], 6))
        if key not in seen:
            seen.add(key)
            out.append(b)
    return out
