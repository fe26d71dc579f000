"""Bird's-eye-view lattice definitions and the frame-union extension logic.

A grid spec describes a regular lattice on the ground plane of the reference
ego frame: columns index the lateral axis (left to right), rows index the
longitudinal axis with row 0 nearest the ego vehicle.  Cell (r, c) covers
the half-open square

    [lateral_min + c*res, lateral_min + (c+1)*res)
  x [longitudinal_min + r*res, longitudinal_min + (r+1)*res)

and its centre carries the cell's world coordinate.  When several frames
are aggregated the target lattice is grown outward by whole cells so every
frame's ground footprint fits, which keeps the crop back to the target a
pure slice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .camera import PinholeCamera, Pose, pixels_to_ground
from .errors import InvalidExtentError, ShapeMismatchError


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a BEV lattice plus the channel count of grids built on it."""

    resolution: float
    lateral_min: float
    lateral_max: float
    longitudinal_min: float
    longitudinal_max: float
    rows: int
    cols: int
    channels: int = 1

    def __post_init__(self):
        if self.resolution <= 0:
            raise InvalidExtentError("resolution must be positive")
        if self.lateral_max <= self.lateral_min:
            raise InvalidExtentError("lateral extent is empty or inverted")
        if self.longitudinal_max <= self.longitudinal_min:
            raise InvalidExtentError("longitudinal extent is empty or inverted")
        if self.rows <= 0 or self.cols <= 0:
            raise InvalidExtentError("grid must have at least one row and column")
        if self.channels <= 0:
            raise InvalidExtentError("channel count must be positive")

    @classmethod
    def from_extents(
        cls,
        resolution: float,
        lateral: tuple[float, float],
        longitudinal: tuple[float, float],
        channels: int = 1,
    ) -> "GridSpec":
        """Derive row/column counts from metric extents.

        Counts are exact for integer multiples of the resolution, otherwise
        rounded half-up; the stated extents are then honoured to within one
        cell (the effective extent is ``min + count * resolution``).
        """
        if resolution <= 0:
            raise InvalidExtentError("resolution must be positive")
        cols = _round_half_up((lateral[1] - lateral[0]) / resolution)
        rows = _round_half_up((longitudinal[1] - longitudinal[0]) / resolution)
        if rows <= 0 or cols <= 0:
            raise InvalidExtentError("extents smaller than one cell")
        return cls(
            resolution,
            lateral[0],
            lateral[1],
            longitudinal[0],
            longitudinal[1],
            rows,
            cols,
            channels,
        )

    def with_channels(self, channels: int) -> "GridSpec":
        return replace(self, channels=channels)

    def same_lattice(self, other) -> bool:
        """True when both specs describe the same spatial lattice."""
        return (
            self.resolution == other.resolution
            and self.lateral_min == other.lateral_min
            and self.longitudinal_min == other.longitudinal_min
            and self.rows == other.rows
            and self.cols == other.cols
        )

    def cell_centers(self) -> np.ndarray:
        """(rows, cols, 2) array of cell-centre world coordinates."""
        lat = self.lateral_min + (np.arange(self.cols) + 0.5) * self.resolution
        lon = self.longitudinal_min + (np.arange(self.rows) + 0.5) * self.resolution
        lat_g, lon_g = np.meshgrid(lat, lon)
        return np.stack([lat_g, lon_g], axis=-1)


@dataclass(frozen=True)
class ExtendedGridSpec(GridSpec):
    """A grid grown outward from a target lattice by whole cells.

    ``row_offset``/``col_offset`` give the position of the target's cell
    (0, 0) inside the extended lattice.
    """

    target: GridSpec = None
    row_offset: int = 0
    col_offset: int = 0

    def __post_init__(self):
        super().__post_init__()
        if self.target is None:
            raise InvalidExtentError("extended spec requires a target")
        t = self.target
        if self.resolution != t.resolution:
            raise InvalidExtentError("extended grid must keep the target resolution")
        if self.row_offset < 0 or self.col_offset < 0:
            raise InvalidExtentError("target must lie inside the extended grid")
        if self.row_offset + t.rows > self.rows or self.col_offset + t.cols > self.cols:
            raise InvalidExtentError("target must lie inside the extended grid")


@dataclass(eq=False)
class BevGrid:
    """A dense (rows, cols, channels) array of values on a lattice."""

    spec: GridSpec
    data: np.ndarray
    fill_value: float = 0.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        expected = (self.spec.rows, self.spec.cols, self.spec.channels)
        if self.data.shape != expected:
            raise ShapeMismatchError(
                f"grid data shape {self.data.shape} != spec shape {expected}"
            )

    @classmethod
    def full(cls, spec: GridSpec, fill_value: float = 0.0) -> "BevGrid":
        data = np.full((spec.rows, spec.cols, spec.channels), float(fill_value))
        return cls(spec, data, fill_value)


@dataclass(eq=False)
class FovMask:
    """Boolean lattice marking cells visible to a frame's camera."""

    spec: GridSpec
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)
        if self.data.shape != (self.spec.rows, self.spec.cols):
            raise ShapeMismatchError(
                f"mask shape {self.data.shape} != lattice ({self.spec.rows}, {self.spec.cols})"
            )


def make_target_grid(
    resolution: float = 0.25,
    lateral: tuple[float, float] = (-25.0, 25.0),
    longitudinal: tuple[float, float] = (1.0, 50.0),
    channels: int = 1,
) -> GridSpec:
    """Target lattice for the reference frame (defaults: 196 x 200 cells)."""
    return GridSpec.from_extents(resolution, lateral, longitudinal, channels)


def cell_to_world(spec: GridSpec, row: int, col: int) -> np.ndarray:
    """Centre of cell (row, col) as (lateral, longitudinal) metres."""
    if not (0 <= row < spec.rows and 0 <= col < spec.cols):
        raise IndexError(f"cell ({row}, {col}) outside a {spec.rows}x{spec.cols} grid")
    return np.array(
        [
            spec.lateral_min + (col + 0.5) * spec.resolution,
            spec.longitudinal_min + (row + 0.5) * spec.resolution,
        ]
    )


def world_to_cell(spec: GridSpec, point):
    """Cell (row, col) containing the point, or None when outside the grid.

    Cells are half-open on their upper edges, so a point exactly on the far
    boundary is outside.
    """
    point = np.asarray(point, dtype=float)
    col = math.floor((point[0] - spec.lateral_min) / spec.resolution)
    row = math.floor((point[1] - spec.longitudinal_min) / spec.resolution)
    if 0 <= row < spec.rows and 0 <= col < spec.cols:
        return row, col
    return None


def _frame_ground_footprint(
    camera: PinholeCamera, pose: Pose, max_range: float, plane_height: float = 0.0
) -> np.ndarray:
    """Ground points outlining a camera's visible footprint, range-clipped.

    Every border pixel of the raster is back-projected; rays that miss the
    plane (at or above the horizon) contribute a point at ``max_range``
    along their horizontal direction, and ground hits are clipped to
    ``max_range`` from the camera's ground position.
    """
    w, h = camera.image_width, camera.image_height
    top = np.stack([np.arange(w, dtype=float), np.zeros(w)], axis=-1)
    bottom = np.stack([np.arange(w, dtype=float), np.full(w, h - 1.0)], axis=-1)
    left = np.stack([np.zeros(h), np.arange(h, dtype=float)], axis=-1)
    right = np.stack([np.full(h, w - 1.0), np.arange(h, dtype=float)], axis=-1)
    border = np.concatenate([top, bottom, left, right], axis=0)

    xy, valid = pixels_to_ground(camera, pose, border, plane_height)
    origin = pose.translation[:2]

    # Horizontal direction of each ray, for the no-intersection clamp.
    px = border
    d_cam = np.stack(
        [
            (px[:, 0] - camera.cx) / camera.fx,
            (camera.cy - px[:, 1]) / camera.fy,
            np.ones(len(px)),
        ],
        axis=-1,
    )
    d_world = d_cam @ pose.rotation.T
    horiz = d_world[:, :2]
    norms = np.linalg.norm(horiz, axis=1)
    ok = norms > 1e-12
    unit = np.where(ok[:, None], horiz / np.maximum(norms, 1e-12)[:, None], 0.0)

    offsets = xy - origin
    dist = np.linalg.norm(offsets, axis=1)
    clipped = np.where(
        (valid & (dist <= max_range))[:, None],
        xy,
        origin + max_range * unit,
    )
    return np.vstack([clipped[ok | valid], origin])


def extend_for_frames(
    target: GridSpec,
    cameras_and_poses,
    max_range: float = 60.0,
    plane_height: float = 0.0,
) -> ExtendedGridSpec:
    """Grow the target lattice to cover every frame's ground footprint.

    ``cameras_and_poses`` is a sequence of ``(PinholeCamera, Pose)`` pairs
    with poses mapping camera coordinates into the reference ego frame.
    The extension is snapped outward to whole cells of the target lattice,
    so the target sits at an integral (row, col) offset inside the result.
    """
    if max_range <= 0:
        raise InvalidExtentError("max_range must be positive")
    lat_min, lat_max = target.lateral_min, target.lateral_max
    lon_min, lon_max = target.longitudinal_min, target.longitudinal_max
    for camera, pose in cameras_and_poses:
        pts = _frame_ground_footprint(camera, pose, max_range, plane_height)
        lat_min = min(lat_min, pts[:, 0].min())
        lat_max = max(lat_max, pts[:, 0].max())
        lon_min = min(lon_min, pts[:, 1].min())
        lon_max = max(lon_max, pts[:, 1].max())

    res = target.resolution
    grow_left = math.ceil(max(0.0, target.lateral_min - lat_min) / res - 1e-9)
    grow_right = math.ceil(max(0.0, lat_max - target.lateral_max) / res - 1e-9)
    grow_near = math.ceil(max(0.0, target.longitudinal_min - lon_min) / res - 1e-9)
    grow_far = math.ceil(max(0.0, lon_max - target.longitudinal_max) / res - 1e-9)

    return ExtendedGridSpec(
        resolution=res,
        lateral_min=target.lateral_min - grow_left * res,
        lateral_max=target.lateral_max + grow_right * res,
        longitudinal_min=target.longitudinal_min - grow_near * res,
        longitudinal_max=target.longitudinal_max + grow_far * res,
        rows=target.rows + grow_near + grow_far,
        cols=target.cols + grow_left + grow_right,
        channels=target.channels,
        target=target,
        row_offset=grow_near,
        col_offset=grow_left,
    )


def crop_to_target(grid: BevGrid) -> BevGrid:
    """Slice an extended grid back to its target lattice."""
    spec = grid.spec
    if not isinstance(spec, ExtendedGridSpec):
        raise ShapeMismatchError("crop_to_target requires a grid on an extended spec")
    t = spec.target.with_channels(spec.channels)
    data = grid.data[
        spec.row_offset : spec.row_offset + t.rows,
        spec.col_offset : spec.col_offset + t.cols,
    ]
    return BevGrid(t, data.copy(), grid.fill_value)


def crop_mask_to_target(mask: FovMask) -> FovMask:
    """Slice an extended-lattice mask back to the target lattice."""
    spec = mask.spec
    if not isinstance(spec, ExtendedGridSpec):
        raise ShapeMismatchError("crop requires a mask on an extended spec")
    t = spec.target
    data = mask.data[
        spec.row_offset : spec.row_offset + t.rows,
        spec.col_offset : spec.col_offset + t.cols,
    ]
    return FovMask(t, data.copy())
