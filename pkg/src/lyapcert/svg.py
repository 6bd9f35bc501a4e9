"""Minimal native SVG rendering: validity heatmaps, ROA overlays, trajectories.

No plotting dependency; plain string assembly. Grids with more than two state
dimensions are drawn as the 2-D slice through the origin along a chosen axis
pair.
"""

from __future__ import annotations

import numpy as np

GREEN = "#3fa34d"
RED = "#d64545"
PALE = "#bfe3c5"

CANVAS = 640.0
MARGIN = 40.0


def _scaler(radius: float):
    span = 2.0 * radius
    scale = (CANVAS - 2 * MARGIN) / span

    def to_px(u: float, v: float) -> tuple[float, float]:
        return (MARGIN + (u + radius) * scale, CANVAS - MARGIN - (v + radius) * scale)

    return to_px, scale


def _slice_rows(grid, axes: tuple[int, int]) -> np.ndarray:
    """Rows whose off-plane lattice coordinates are all zero."""
    rest = [k for k in range(grid.dim) if k not in axes]
    if not rest:
        return np.arange(grid.n_nodes)
    mask = np.all(grid.lattice[:, rest] == 0, axis=1)
    return np.nonzero(mask)[0]


def render_validity_svg(vmap, grid, roa=None, trajectories=None,
                        axes: tuple[int, int] = (0, 1)) -> str:
    """Green/red cell map with optional ROA member outline and trajectories."""
    to_px, scale = _scaler(grid.radius)
    cell = grid.spacing * scale
    rows = _slice_rows(grid, axes)
    green = vmap.green
    member = set()
    if roa is not None and not roa.empty:
        member = set(int(r) for r in roa.member_rows)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS:.0f}" height="{CANVAS:.0f}" '
        f'viewBox="0 0 {CANVAS:.0f} {CANVAS:.0f}">',
        f'<rect width="{CANVAS:.0f}" height="{CANVAS:.0f}" fill="white"/>',
    ]
    for row in rows:
        u, v = grid.coords[row, axes[0]], grid.coords[row, axes[1]]
        px, py = to_px(u, v)
        color = PALE if vmap.exempt[row] else (GREEN if green[row] else RED)
        parts.append(
            f'<rect x="{px - cell / 2:.2f}" y="{py - cell / 2:.2f}" '
            f'width="{cell:.2f}" height="{cell:.2f}" fill="{color}" fill-opacity="0.85"/>'
        )
    if member:
        for row in rows:
            if int(row) not in member:
                continue
            u, v = grid.coords[row, axes[0]], grid.coords[row, axes[1]]
            px, py = to_px(u, v)
            parts.append(
                f'<rect x="{px - cell / 2:.2f}" y="{py - cell / 2:.2f}" '
                f'width="{cell:.2f}" height="{cell:.2f}" fill="none" '
                f'stroke="#1f2a44" stroke-width="0.6"/>'
            )
    if trajectories:
        for traj in trajectories:
            pts = " ".join(
                f"{x:.2f},{y:.2f}"
                for x, y in (to_px(s[axes[0]], s[axes[1]]) for s in traj.states)
            )
            parts.append(f'<polyline points="{pts}" fill="none" stroke="#14365f" stroke-width="1.2"/>')
    parts.append(_axis_frame(grid.radius, to_px))
    parts.append("</svg>")
    return "\n".join(parts)


def render_phase_svg(system, grid, roa=None, trajectories=None, density: int = 24) -> str:
    """2-D phase portrait (vector field glyphs) with optional ROA cells."""
    if grid.dim != 2:
        raise ValueError("phase portraits are drawn for 2-D state spaces only")
    to_px, scale = _scaler(grid.radius)
    xs = np.linspace(-grid.radius, grid.radius, density)
    pts = np.array([(a, b) for a in xs for b in xs])
    pts = pts[np.linalg.norm(pts, axis=1) <= grid.radius]
    vel = system.f_batch(pts)
    norm = np.linalg.norm(vel, axis=1, keepdims=True)
    unit = vel / np.maximum(norm, 1e-12)
    arrow_len = 0.35 * (2 * grid.radius / density)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS:.0f}" height="{CANVAS:.0f}" '
        f'viewBox="0 0 {CANVAS:.0f} {CANVAS:.0f}">',
        f'<rect width="{CANVAS:.0f}" height="{CANVAS:.0f}" fill="white"/>',
    ]
    if roa is not None and not roa.empty:
        cell = grid.spacing * scale
        for row in roa.member_rows:
            px, py = to_px(grid.coords[row, 0], grid.coords[row, 1])
            parts.append(
                f'<rect x="{px - cell / 2:.2f}" y="{py - cell / 2:.2f}" width="{cell:.2f}" '
                f'height="{cell:.2f}" fill="{PALE}" fill-opacity="0.7"/>'
            )
    for p, u in zip(pts, unit):
        x0, y0 = to_px(p[0], p[1])
        x1, y1 = to_px(p[0] + arrow_len * u[0], p[1] + arrow_len * u[1])
        parts.append(f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y1:.2f}" '
                     f'stroke="#5a5a5a" stroke-width="0.8"/>')
        parts.append(f'<circle cx="{x1:.2f}" cy="{y1:.2f}" r="1.1" fill="#5a5a5a"/>')
    if trajectories:
        for traj in trajectories:
            pts_s = " ".join(f"{x:.2f},{y:.2f}" for x, y in (to_px(s[0], s[1]) for s in traj.states))
            parts.append(f'<polyline points="{pts_s}" fill="none" stroke="#14365f" stroke-width="1.2"/>')
    parts.append(_axis_frame(grid.radius, to_px))
    parts.append("</svg>")
    return "\n".join(parts)


def _axis_frame(radius: float, to_px) -> str:
    x0, y0 = to_px(-radius, -radius)
    x1, y1 = to_px(radius, radius)
    return (f'<rect x="{min(x0, x1):.2f}" y="{min(y0, y1):.2f}" '
            f'width="{abs(x1 - x0):.2f}" height="{abs(y1 - y0):.2f}" '
            f'fill="none" stroke="#222222" stroke-width="1"/>')
