"""Region-of-attraction extraction from validity maps.

The certified ROA is the largest sublevel set {Vbar <= c} whose nodes are all
green, which stays clear of the outer boundary layer of D (so the continuum
set cannot leak out of the verified region), restricted to the face-connected
component of the origin. Everything is grid-resolution limited: the reported
c is exact on nodes and conservative by at most one cell ring in between.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace

import numpy as np

from .dynamics import ClosedLoopSystem, sample_ball, simulate_batch
from .verify import GridSpec, ValidityMap


class BadAxes(Exception):
    """Projection axes out of range or not distinct."""


@dataclass(frozen=True, eq=False)
class RoaResult:
    c: float                    # certified sublevel value
    member_rows: np.ndarray     # grid rows with Vbar <= c (origin component)
    area: float                 # member cell count x cell volume (or plane shadow)
    plane: tuple[int, int] | None
    empty: bool

    @property
    def n_cells(self) -> int:
        return int(self.member_rows.size)


def _empty_result(grid: GridSpec, plane) -> RoaResult:
    return RoaResult(c=0.0, member_rows=np.array([grid.origin_row]), area=0.0,
                     plane=plane, empty=True)


def _origin_component(rows: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Restrict member rows to the face-adjacent component containing the origin."""
    member = set(int(r) for r in rows)
    if grid.origin_row not in member:
        member.add(grid.origin_row)
    seen = {grid.origin_row}
    stack = [grid.origin_row]
    while stack:
        row = stack.pop()
        point = grid.lattice[row]
        for axis in range(grid.dim):
            for step in (-1, 1):
                neighbor = point.copy()
                neighbor[axis] += step
                j = grid.row_of(neighbor)
                if j is not None and j in member and j not in seen:
                    seen.add(j)
                    stack.append(j)
    return np.asarray(sorted(seen), dtype=int)


def largest_level_set(vmap: ValidityMap, grid: GridSpec,
                      plane: tuple[int, int] | None = None) -> RoaResult:
    """Sort-and-scan extraction of the certified sublevel value.

    Scans nodes by increasing Vbar; the first node that is either not green
    or sits in the outer boundary layer caps the level strictly below its
    value. A cap at or below zero yields the empty result (c = 0, area 0).
    """
    order = np.argsort(vmap.vbar, kind="stable")
    blocked = (~vmap.green) | grid.boundary
    cap = None
    best = None
    for row in order:
        if row == grid.origin_row:
            continue
        if blocked[row]:
            cap = vmap.vbar[row]
            break
        best = vmap.vbar[row]
    if cap is None:
        c = best if best is not None else 0.0
    else:
        eligible = vmap.vbar[(vmap.vbar < cap) & ~vmap.exempt]
        c = float(np.max(eligible)) if eligible.size else 0.0
    if c <= 0.0:
        return _empty_result(grid, plane)

    rows = np.nonzero(vmap.vbar <= c)[0]
    rows = _origin_component(rows, grid)
    result = RoaResult(c=float(c), member_rows=rows, area=0.0, plane=plane, empty=False)
    return replace(result, area=roa_area(result, grid))


def roa_area(result: RoaResult, grid: GridSpec) -> float:
    """Member-cell area: full-dimensional for dim <= 2, plane shadow above."""
    if result.empty or result.c <= 0.0:
        return 0.0
    if grid.dim > 2 and result.plane is not None:
        shadow = project_plane(result, grid, result.plane)
        return float(shadow.shape[0] * grid.spacing**2)
    return float(result.n_cells * grid.cell_volume)


def project_plane(result: RoaResult, grid: GridSpec, axes: tuple[int, int],
                  fixed_values=None) -> np.ndarray:
    """Shadow of the member cells on the (i, j) plane.

    Returns the distinct (lattice_i, lattice_j) pairs, each counted once
    regardless of depth multiplicity. With `fixed_values`, only member nodes
    whose remaining coordinates match the nearest lattice values of
    `fixed_values` contribute (a slice instead of a shadow).
    """
    i, j = axes
    if i == j or not (0 <= i < grid.dim and 0 <= j < grid.dim):
        raise BadAxes(f"invalid projection axes {axes} for dim {grid.dim}")
    members = grid.lattice[result.member_rows]
    if fixed_values is not None:
        rest = [k for k in range(grid.dim) if k not in (i, j)]
        target = np.asarray(fixed_values, dtype=float) / grid.spacing
        target = np.round(target).astype(int)
        mask = np.all(members[:, rest] == target[None, :], axis=1)
        members = members[mask]
    pairs = members[:, (i, j)]
    return np.unique(pairs, axis=0)


@dataclass(frozen=True)
class ConvergenceCheck:
    fraction: float
    n_samples: int
    vacuous: bool


def monte_carlo_convergence(system: ClosedLoopSystem, result: RoaResult, grid: GridSpec,
                            n_samples: int, h: float, horizon: float, tol: float,
                            seed: int, candidate=None) -> ConvergenceCheck:
    """Roll out RK4 trajectories from inside the certified set.

    Initial states are uniform over the member cells; when the candidate is
    supplied, draws are rejection-filtered to the certified sublevel set
    {Vbar <= c} (cell jitter can otherwise step just over the level). Returns
    the fraction with |x(horizon)|_2 < tol. An empty ROA is vacuously 1.0.
    """
    if n_samples < 1:
        raise ValueError("need n_samples >= 1")
    if result.empty:
        return ConvergenceCheck(fraction=1.0, n_samples=0, vacuous=True)
    rng = np.random.default_rng(seed)
    centers = grid.coords[result.member_rows]
    v0 = float(candidate.value(np.zeros((1, grid.dim)))[0]) if candidate is not None else 0.0

    points = []
    attempts = 0
    while len(points) < n_samples and attempts < 60 * n_samples:
        take = n_samples - len(points)
        idx = rng.integers(centers.shape[0], size=take)
        jitter = rng.uniform(-0.5, 0.5, size=(take, grid.dim)) * grid.spacing
        batch = centers[idx] + jitter
        ok = np.linalg.norm(batch, axis=1) <= grid.radius
        if candidate is not None:
            ok &= (candidate.value(batch) - v0) <= result.c
        points.extend(batch[ok])
        attempts += take
    if len(points) < n_samples:
        # jitter keeps landing above the level: fall back to the node centers
        idx = rng.integers(centers.shape[0], size=n_samples - len(points))
        points.extend(centers[idx])
    X0 = np.asarray(points[:n_samples])

    finals, diverged = simulate_batch(system, X0, h, horizon)
    converged = (~diverged) & (np.linalg.norm(finals, axis=1) < tol)
    return ConvergenceCheck(fraction=float(np.mean(converged)), n_samples=n_samples, vacuous=False)


def sample_annulus(rng: np.random.Generator, n: int, dim: int, outer: float,
                   inner: float = 0.0) -> np.ndarray:
    """Uniform samples over the ball of radius `outer`, excluding radius `inner`."""
    out = np.empty((0, dim))
    while out.shape[0] < n:
        batch = sample_ball(rng, n, dim, outer)
        keep = np.linalg.norm(batch, axis=1) > inner
        out = np.concatenate([out, batch[keep]])
    return out[:n]


def export_roa_json(result: RoaResult, grid: GridSpec, path, config_hash: str = "",
                    seed: int | None = None) -> None:
    payload = {
        "config_hash": config_hash,
        "seed": seed,
        "c": result.c,
        "area": result.area,
        "n_cells": result.n_cells,
        "empty": result.empty,
        "plane": list(result.plane) if result.plane else None,
        "grid": {"radius": grid.radius, "nodes_per_axis": grid.nodes_per_axis,
                 "dim": grid.dim, "tau": grid.tau},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


def export_boundary_csv(result: RoaResult, grid: GridSpec, path) -> None:
    """Member cells whose face neighborhood leaves the member set (2-D plane)."""
    axes = result.plane if (grid.dim > 2 and result.plane) else (0, 1)
    shadow = project_plane(result, grid, axes) if not result.empty else np.empty((0, 2), dtype=int)
    cells = set(map(tuple, shadow))
    boundary = []
    for ci, cj in sorted(cells):
        if any((ci + di, cj + dj) not in cells
               for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1))):
            boundary.append((ci * grid.spacing, cj * grid.spacing))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["u", "v"])
        for u, v in boundary:
            writer.writerow([repr(float(u)), repr(float(v))])
