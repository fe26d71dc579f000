"""Visibility masks from a simulated spinning-beam range sensor.

A virtual sensor at ``origin`` casts one ray per (azimuth, elevation) pair.
Rays are marched along their horizontal ground projection in steps of half
a cell; a cell counts as *non-occluded* when at least one ray crosses it at
or below ``pass_height`` before the ray is absorbed.  Rays are absorbed by
the first obstacle whose footprint they enter below that obstacle's height,
by the ground (the sample height dropping below zero), or by running out of
range.

Two geometric consequences worth knowing when choosing grids:

* the sensor has a blind ring: with the default beam fan the steepest beam
  first dips below ``pass_height`` at ``(origin_z - pass_height) /
  tan(30 deg)`` metres, so closer cells are never crossed low enough;
* at long range the discrete beam fan leaves radial gaps between
  consecutive elevations; raise ``elevation_count`` when grids extend far.

Within the band the fan covers densely, an obstacle-free mask depends only
on ``max_range`` (the in-range disk intersected with the grid).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError
from .grid import FovMask, GridSpec


def default_elevations(count: int = 32, lo_deg: float = -30.0, hi_deg: float = 10.0):
    """Uniformly spaced beam elevations in radians, endpoints included."""
    return np.deg2rad(np.linspace(lo_deg, hi_deg, count))


@dataclass(frozen=True, eq=False)
class LidarSpec:
    """Beam geometry of the simulated sensor, in the reference ego frame."""

    origin: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.8]))
    azimuth_count: int = 1024
    elevation_angles: np.ndarray = field(default_factory=default_elevations)
    max_range: float = 70.0

    def __post_init__(self):
        origin = np.array(self.origin, dtype=float).reshape(3)
        elev = np.atleast_1d(np.array(self.elevation_angles, dtype=float))
        if self.azimuth_count < 1:
            raise ValueError("need at least one azimuth")
        if elev.size < 1:
            raise ValueError("need at least one elevation angle")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if origin[2] <= 0:
            raise ValueError("sensor must sit above the ground plane")
        origin.setflags(write=False)
        elev.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "elevation_angles", elev)


@dataclass(frozen=True, eq=False)
class Obstacle:
    """A vertical prism: convex CCW footprint polygon extruded to ``height``."""

    vertices: np.ndarray
    height: float

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
            raise ValueError("footprint needs at least three 2-d vertices")
        if self.height <= 0:
            raise ValueError("obstacle height must be positive")
        nxt = np.roll(v, -1, axis=0)
        after = np.roll(v, -2, axis=0)
        cross = (nxt[:, 0] - v[:, 0]) * (after[:, 1] - nxt[:, 1]) - (
            nxt[:, 1] - v[:, 1]
        ) * (after[:, 0] - nxt[:, 0])
        if np.any(cross < -1e-9):
            raise ValueError("footprint must be convex with CCW winding")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    def contains(self, points) -> np.ndarray:
        """Boundary-inclusive membership test for (..., 2) points."""
        pts = np.asarray(points, dtype=float)
        inside = np.ones(pts.shape[:-1], dtype=bool)
        n = len(self.vertices)
        for i in range(n):
            a = self.vertices[i]
            b = self.vertices[(i + 1) % n]
            cross = (b[0] - a[0]) * (pts[..., 1] - a[1]) - (b[1] - a[1]) * (
                pts[..., 0] - a[0]
            )
            inside &= cross >= 0
        return inside


def rectangle_footprint(center, heading: float, width: float, length: float) -> np.ndarray:
    """CCW rectangle vertices; ``heading`` turns its long axis from +y."""
    half_w, half_l = width / 2.0, length / 2.0
    corners = np.array(
        [
            [-half_w, -half_l],
            [half_w, -half_l],
            [half_w, half_l],
            [-half_w, half_l],
        ]
    )
    c, s = np.cos(heading), np.sin(heading)
    rot = np.array([[c, -s], [s, c]])
    return corners @ rot.T + np.asarray(center, dtype=float)


def compute_occlusion_mask(
    lidar: LidarSpec,
    obstacles,
    spec: GridSpec,
    pass_height: float = 0.5,
) -> np.ndarray:
    """Boolean (rows, cols) lattice; True marks non-occluded cells."""
    if pass_height < 0:
        raise ValueError("pass_height must be non-negative")
    obstacles = list(obstacles)
    visited = np.zeros((spec.rows, spec.cols), dtype=bool)
    step = spec.resolution / 2.0
    azimuths = np.linspace(0.0, 2.0 * np.pi, lidar.azimuth_count, endpoint=False)
    directions = np.stack([np.sin(azimuths), np.cos(azimuths)], axis=-1)
    x0, y0, z0 = lidar.origin

    for elevation in lidar.elevation_angles:
        horiz_reach = lidar.max_range * np.cos(elevation)
        if np.tan(elevation) < 0:
            # The beam is absorbed where it meets the ground.
            horiz_reach = min(horiz_reach, z0 / -np.tan(elevation))
        n_samples = int(np.floor(horiz_reach / step))
        if n_samples < 1:
            continue
        s = (np.arange(n_samples) + 1) * step
        z = z0 + s * np.tan(elevation)
        keep = z >= 0.0
        s = s[keep]
        z = z[keep]
        if s.size == 0:
            continue

        xy = lidar.origin[:2] + s[None, :, None] * directions[:, None, :]

        absorbed = np.zeros((lidar.azimuth_count, s.size), dtype=bool)
        for obstacle in obstacles:
            absorbed |= obstacle.contains(xy) & (z < obstacle.height)[None, :]
        reached = np.cumsum(absorbed, axis=1) == 0

        low = z <= pass_height
        marking = reached & low[None, :]
        if not np.any(marking):
            continue
        pts = xy[marking]
        cols = np.floor((pts[:, 0] - spec.lateral_min) / spec.resolution).astype(int)
        rows = np.floor((pts[:, 1] - spec.longitudinal_min) / spec.resolution).astype(int)
        ok = (rows >= 0) & (rows < spec.rows) & (cols >= 0) & (cols < spec.cols)
        visited[rows[ok], cols[ok]] = True
    return visited


def evaluation_mask(fov: FovMask, occlusion: np.ndarray) -> np.ndarray:
    """Cells that are both inside the camera FOV and non-occluded."""
    occlusion = np.asarray(occlusion, dtype=bool)
    if occlusion.shape != fov.data.shape:
        raise ShapeMismatchError(
            f"occlusion shape {occlusion.shape} != fov shape {fov.data.shape}"
        )
    return fov.data & occlusion
