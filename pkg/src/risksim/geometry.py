"""Oriented-box geometry: corners, overlap tests, grid rasterization, corner metric.

Conventions:
  - Collision tests treat boxes as closed sets, so touching edges overlap.
  - Rasterization marks cells whose square intersects the box with positive
    area; a box edge lying exactly on a cell border does not claim the
    neighboring cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scene import VehicleDims, DEFAULT_DIMS


@dataclass(frozen=True)
class OrientedBox:
    """Rectangle with center, heading, and vehicle dimensions."""

    center: tuple[float, float]
    heading: float
    dims: VehicleDims

    def __post_init__(self):
        if not math.isfinite(self.heading):
            raise ValueError("heading must be finite")
        if not all(math.isfinite(c) for c in self.center):
            raise ValueError("center must be finite")


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid: cell (ix, iy) covers origin + [ix, ix+1) x [iy, iy+1) cells."""

    origin: tuple[float, float]
    cell: float
    nx: int
    ny: int

    def __post_init__(self):
        if not self.cell > 0:
            raise ValueError("cell size must be positive")
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid must have at least one cell per axis")


def grid_from_bounds(bounds: tuple[float, float, float, float], cell: float) -> GridSpec:
    """Smallest grid of the given cell size covering an axis-aligned rectangle."""
    xmin, ymin, xmax, ymax = bounds
    nx = max(1, int(math.ceil((xmax - xmin) / cell)))
    ny = max(1, int(math.ceil((ymax - ymin) / cell)))
    return GridSpec((xmin, ymin), cell, nx, ny)


def corners_from_pose(
    cx: float, cy: float, cos_h: float, sin_h: float, length: float, width: float
) -> np.ndarray:
    """Corners (front-left, front-right, rear-right, rear-left) in world frame."""
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)])
    rot = np.array([(cos_h, -sin_h), (sin_h, cos_h)])
    return local @ rot.T + np.array([cx, cy])


def box_corners(box: OrientedBox) -> np.ndarray:
    """World-frame corners of an oriented box, in fixed FL, FR, RR, RL order."""
    c, s = math.cos(box.heading), math.sin(box.heading)
    return corners_from_pose(
        box.center[0], box.center[1], c, s, box.dims.length, box.dims.width
    )


def _projection_overlaps(corners_a: np.ndarray, corners_b: np.ndarray) -> np.ndarray:
    """Signed projection overlap of two corner sets on the 4 face normals.

    Axes are the edge normals of both rectangles (2 per box). A negative
    entry means the boxes are separated along that axis.
    """
    axes = []
    for corners in (corners_a, corners_b):
        e1 = corners[1] - corners[0]
        e2 = corners[3] - corners[0]
        for e in (e1, e2):
            n = math.hypot(e[0], e[1])
            if n > 0:
                axes.append(e / n)
    axes = np.array(axes)
    proj_a = corners_a @ axes.T
    proj_b = corners_b @ axes.T
    return np.minimum(proj_a.max(axis=0), proj_b.max(axis=0)) - np.maximum(
        proj_a.min(axis=0), proj_b.min(axis=0)
    )


def boxes_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    """Separating-axis intersection test; touching edges count as overlap."""
    return corners_overlap(box_corners(a), box_corners(b))


def corners_overlap(corners_a: np.ndarray, corners_b: np.ndarray) -> bool:
    """boxes_overlap on precomputed corner arrays."""
    # Broad phase: circumscribed circles.
    ca = corners_a.mean(axis=0)
    cb = corners_b.mean(axis=0)
    ra = np.linalg.norm(corners_a - ca, axis=1).max()
    rb = np.linalg.norm(corners_b - cb, axis=1).max()
    if math.hypot(*(ca - cb)) > ra + rb:
        return False
    return bool((_projection_overlaps(corners_a, corners_b) >= 0.0).all())


def overlap_margin(a: OrientedBox, b: OrientedBox) -> float:
    """Minimum projection overlap across the 4 face normals.

    Positive values bound the penetration depth, negative values the
    separation gap; values near zero mean near-tangency.
    """
    return float(_projection_overlaps(box_corners(a), box_corners(b)).min())


def rasterize_corners(corners: np.ndarray, grid: GridSpec) -> set[tuple[int, int]]:
    """Cells whose square intersects the given rectangle with positive area."""
    ox, oy = grid.origin
    cell = grid.cell
    xs = corners[:, 0]
    ys = corners[:, 1]
    ix0 = max(0, int(math.floor((xs.min() - ox) / cell)))
    ix1 = min(grid.nx - 1, int(math.floor((xs.max() - ox) / cell)))
    iy0 = max(0, int(math.floor((ys.min() - oy) / cell)))
    iy1 = min(grid.ny - 1, int(math.floor((ys.max() - oy) / cell)))
    if ix0 > ix1 or iy0 > iy1:
        return set()

    ix = np.arange(ix0, ix1 + 1)
    iy = np.arange(iy0, iy1 + 1)
    gx, gy = np.meshgrid(ix, iy, indexing="ij")
    cx = ox + (gx + 0.5) * cell  # cell centers
    cy = oy + (gy + 0.5) * cell
    half = 0.5 * cell

    # Axis-aligned axes: strict interval overlap against the box AABB.
    ok = (
        (np.minimum(cx + half, xs.max()) > np.maximum(cx - half, xs.min()))
        & (np.minimum(cy + half, ys.max()) > np.maximum(cy - half, ys.min()))
    )

    # Box axes: compare center-projection distance against summed half-extents.
    center = corners.mean(axis=0)
    for edge in (corners[1] - corners[0], corners[3] - corners[0]):
        n = math.hypot(edge[0], edge[1])
        ux, uy = edge[0] / n, edge[1] / n
        proj = corners @ np.array([ux, uy])
        half_box = 0.5 * (proj.max() - proj.min())
        half_cell = half * (abs(ux) + abs(uy))
        dist = np.abs((cx - center[0]) * ux + (cy - center[1]) * uy)
        ok &= dist < half_box + half_cell

    hits = np.argwhere(ok)
    return {(int(ix0 + i), int(iy0 + j)) for i, j in hits}


def rasterize_box(box: OrientedBox, grid: GridSpec) -> set[tuple[int, int]]:
    """Grid cells covered by an oriented box (positive-area intersection)."""
    return rasterize_corners(box_corners(box), grid)


def corner_distance(
    pose_a, pose_b, dims: VehicleDims = DEFAULT_DIMS
) -> float:
    """Mean distance between corresponding box corners under two relative poses.

    Each pose is a (dx, dy, dtheta) transition; the box is placed at the
    resulting pose and the four corner displacements are averaged. This is
    a metric on transitions (symmetric, zero only at identity, triangle
    inequality holds).
    """
    ca = corners_from_pose(
        pose_a[0], pose_a[1], math.cos(pose_a[2]), math.sin(pose_a[2]),
        dims.length, dims.width,
    )
    cb = corners_from_pose(
        pose_b[0], pose_b[1], math.cos(pose_b[2]), math.sin(pose_b[2]),
        dims.length, dims.width,
    )
    return float(np.linalg.norm(ca - cb, axis=1).mean())


def pose_corners(poses: np.ndarray, dims: VehicleDims = DEFAULT_DIMS) -> np.ndarray:
    """Vectorized corner positions for an (n, 3) array of (dx, dy, dtheta) poses."""
    poses = np.asarray(poses, dtype=float)
    hl, hw = 0.5 * dims.length, 0.5 * dims.width
    base = np.array([(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)])
    c = np.cos(poses[:, 2])
    s = np.sin(poses[:, 2])
    x = base[None, :, 0] * c[:, None] - base[None, :, 1] * s[:, None] + poses[:, None, 0]
    y = base[None, :, 0] * s[:, None] + base[None, :, 1] * c[:, None] + poses[:, None, 1]
    return np.stack([x, y], axis=2)


def point_in_convex_polygon(x: float, y: float, poly: np.ndarray) -> bool:
    """Closed-set membership test for a convex polygon (either winding)."""
    poly = np.asarray(poly, dtype=float)
    d = np.roll(poly, -1, axis=0) - poly
    cross = d[:, 0] * (y - poly[:, 1]) - d[:, 1] * (x - poly[:, 0])
    return bool((cross >= 0).all() or (cross <= 0).all())
