"""Procedural ground-truth scenes and their pinhole rendering.

A scene is a flat world: a corridor road with crossings, walkways and
car-park lobes laid out as polygons, a ground-texture colour field derived
from those layers plus smooth noise, dynamic objects (cars, trucks,
pedestrians) with timestamped trajectories, tall box occluders beside the
road, and an ego trajectory driving along the road.

Rendering is deliberately simple and exactly consistent with the package
geometry: every pixel ray either hits an entity prism (object footprints
extruded to their height, occluders likewise), the ground (bilinear lookup
of the texture field), or the sky.  Labels come from the same polygons and
footprints, so label/render consistency is by construction: image labels
are the ground-truth BEV labels seen through the camera, and objects are
labelled by their ground footprint rather than their rendered silhouette.

World and ego frames follow the package convention (x lateral, y
longitudinal, z up); headings measure the forward direction's rotation
away from +y, counter-clockwise positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from matplotlib.path import Path

from .camera import PinholeCamera, Pose
from .errors import GenerationError, ShapeMismatchError, TrajectoryTooShortError
from .grid import BevGrid, GridSpec
from .occlusion import Obstacle, rectangle_footprint

STATIC_CLASSES = ("drivable", "crossing", "walkway", "carpark")
OBJECT_CLASSES = ("car", "truck", "pedestrian")

#: Channel order of label grids: the static layers (multi-label), then the
#: object one-hot block starting with its background channel.
LABEL_CHANNELS = STATIC_CLASSES + ("background",) + OBJECT_CLASSES

# Ground / entity colours.  Chosen so each class is separable from the rest
# by a linear combination of RGB with a margin well above the texture noise,
# and object bodies darker than any ground surface so that max-aggregation
# over frames prefers the unobstructed view of a cell.
PALETTE = {
    "offroad": (0.22, 0.42, 0.20),
    "drivable": (0.45, 0.45, 0.56),
    "walkway": (0.72, 0.62, 0.38),
    "carpark": (0.62, 0.42, 0.44),
    "crossing": (0.78, 0.78, 0.88),
    "car": (0.16, 0.16, 0.20),
    "truck": (0.30, 0.16, 0.10),
    "pedestrian": (0.30, 0.10, 0.25),
    "occluder": (0.35, 0.28, 0.22),
    "sky": (0.65, 0.80, 0.95),
}

OBJECT_DIMENSIONS = {
    # class: (width, length, height)
    "car": (2.0, 4.5, 1.5),
    "truck": (2.6, 8.0, 3.0),
    "pedestrian": (0.6, 0.6, 1.8),
}


@dataclass
class SceneParams:
    """Generation knobs; defaults give a desk-scale urban corridor."""

    road_width_range: tuple = (7.0, 10.0)
    walkway_width: float = 2.5
    crossing_depth: float = 3.0
    crossing_spacing_range: tuple = (14.0, 24.0)
    carpark_depth: float = 8.0
    carpark_length_range: tuple = (12.0, 18.0)
    carpark_probability: float = 0.6
    heading_drift_deg: float = 2.0
    heading_limit_deg: float = 10.0
    car_count_range: tuple = (3, 6)
    truck_count_range: tuple = (0, 2)
    pedestrian_count_range: tuple = (1, 3)
    parked_fraction: float = 0.35
    occluder_count_range: tuple = (3, 6)
    ego_speed: float = 7.0
    timestep: float = 0.5
    duration: float = 12.0
    margin: float = 35.0
    texture_resolution: float = 0.25
    noise_amplitude: float = 0.04
    noise_scale: float = 3.0
    ego_lane_fraction: float = 0.25

    def validate(self):
        if self.road_width_range[0] < 4.0:
            raise GenerationError("road too narrow for two lanes")
        if self.timestep <= 0 or self.duration <= 0 or self.ego_speed <= 0:
            raise GenerationError("ego motion parameters must be positive")
        if self.margin < 10.0:
            raise GenerationError("world margin too small for the camera range")


@dataclass(eq=False)
class TextureField:
    """Regular RGB raster over the world ground plane with bilinear lookup."""

    origin: np.ndarray  # (2,) world coords of the cell (0, 0) corner
    resolution: float
    rgb: np.ndarray  # (ny, nx, 3)

    def sample(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        fx = (pts[..., 0] - self.origin[0]) / self.resolution - 0.5
        fy = (pts[..., 1] - self.origin[1]) / self.resolution - 0.5
        ny, nx = self.rgb.shape[:2]
        fx = np.clip(fx, 0.0, nx - 1.0)
        fy = np.clip(fy, 0.0, ny - 1.0)
        x0 = np.clip(np.floor(fx).astype(int), 0, nx - 2)
        y0 = np.clip(np.floor(fy).astype(int), 0, ny - 2)
        wx = (fx - x0)[..., None]
        wy = (fy - y0)[..., None]
        return (
            self.rgb[y0, x0] * (1 - wx) * (1 - wy)
            + self.rgb[y0, x0 + 1] * wx * (1 - wy)
            + self.rgb[y0 + 1, x0] * (1 - wx) * wy
            + self.rgb[y0 + 1, x0 + 1] * wx * wy
        )


@dataclass(eq=False)
class DynamicObject:
    """A moving (or parked) actor with a rectangular ground footprint."""

    class_name: str
    width: float
    length: float
    height: float
    waypoints: np.ndarray  # (n, 4) rows of (t, x, y, heading)

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float)
        if self.waypoints.ndim != 2 or self.waypoints.shape[1] != 4:
            raise ValueError("waypoints must be (n, 4) rows of (t, x, y, heading)")
        if self.class_name not in OBJECT_CLASSES:
            raise ValueError(f"unknown object class {self.class_name!r}")

    def state_at(self, t: float):
        """Interpolated (x, y, heading); clamped at the trajectory ends."""
        w = self.waypoints
        x = np.interp(t, w[:, 0], w[:, 1])
        y = np.interp(t, w[:, 0], w[:, 2])
        heading = np.interp(t, w[:, 0], w[:, 3])
        return np.array([x, y]), heading

    def footprint_at(self, t: float) -> np.ndarray:
        center, heading = self.state_at(t)
        return rectangle_footprint(center, heading, self.width, self.length)

    @property
    def class_index(self) -> int:
        return OBJECT_CLASSES.index(self.class_name)


@dataclass(eq=False)
class Scene:
    """Static layers, texture, actors, occluders and the ego trajectory."""

    layers: dict  # class name -> list of (n, 2) polygons, world coords
    texture: TextureField
    objects: list
    occluders: list
    ego_timestamps: np.ndarray
    ego_poses: list  # Pose, ego -> world, one per timestamp
    seed: int
    params: SceneParams

    def ego_pose_at_index(self, i: int) -> Pose:
        return self.ego_poses[i]


@dataclass(eq=False)
class Frame:
    """One rendered view plus its pose in the reference ego frame."""

    image: np.ndarray
    camera: PinholeCamera
    pose: Pose  # frame ego -> reference ego
    timestamp: float
    index: int


@dataclass(frozen=True, eq=False)
class CameraRig:
    """The camera plus its fixed mounting pose (camera -> ego)."""

    camera: PinholeCamera
    mount: Pose


def heading_pose(x: float, y: float, heading: float, z: float = 0.0) -> Pose:
    """Ego pose at a planar position; heading rotates forward away from +y."""
    c, s = math.cos(heading), math.sin(heading)
    rotation = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    return Pose(rotation, [x, y, z])


def camera_mount(height: float = 1.6, pitch_deg: float = 10.0) -> Pose:
    """Forward-looking mounting: optical axis pitched down from +y.

    The image-x axis maps to ego -x (the package's proper-rotation forward
    mounting); the rendered view is laterally mirrored, which is harmless
    for a fully synthetic pipeline since every geometric lookup shares it.
    """
    pitch = np.deg2rad(pitch_deg)
    rotation = np.column_stack(
        [
            [-1.0, 0.0, 0.0],
            [0.0, np.sin(pitch), np.cos(pitch)],
            [0.0, np.cos(pitch), -np.sin(pitch)],
        ]
    )
    return Pose(rotation, [0.0, 0.0, height])


def default_rig(
    image_width: int = 512,
    image_height: int = 256,
    focal: float = 256.0,
    height: float = 1.6,
    pitch_deg: float = 10.0,
) -> CameraRig:
    camera = PinholeCamera(
        focal, focal, image_width / 2.0, image_height / 2.0, image_width, image_height
    )
    return CameraRig(camera, camera_mount(height, pitch_deg))


def _polygon_area(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _ccw(vertices: np.ndarray) -> np.ndarray:
    return vertices if _polygon_area(vertices) >= 0 else vertices[::-1]


def _strip_polygon(points, headings, lo: float, hi: float) -> np.ndarray:
    """Corridor band between lateral offsets lo..hi of a centreline."""
    normals = np.stack([np.cos(headings), -np.sin(headings)], axis=-1)
    inner = points + lo * normals
    outer = points + hi * normals
    return _ccw(np.vstack([inner, outer[::-1]]))


def points_in_polygons(points, polygons) -> np.ndarray:
    """Union membership over a polygon list for (..., 2) points."""
    pts = np.asarray(points, dtype=float)
    flat = pts.reshape(-1, 2)
    inside = np.zeros(len(flat), dtype=bool)
    for poly in polygons:
        inside |= Path(poly).contains_points(flat, radius=1e-9)
    return inside.reshape(pts.shape[:-1])


class _Centerline:
    """Arc-length parametrised road spine with gentle heading drift."""

    def __init__(self, rng, params: SceneParams):
        length = params.ego_speed * params.duration + 2.0 * params.margin
        ds = 5.0
        n = int(math.ceil(length / ds)) + 1
        headings = [rng.uniform(-0.5, 0.5) * np.deg2rad(params.heading_limit_deg)]
        limit = np.deg2rad(params.heading_limit_deg)
        drift = np.deg2rad(params.heading_drift_deg)
        for _ in range(n - 1):
            h = headings[-1] + rng.uniform(-drift, drift)
            headings.append(float(np.clip(h, -limit, limit)))
        headings = np.array(headings)
        points = [np.array([0.0, 0.0])]
        for i in range(n - 1):
            step = ds * np.array([math.sin(headings[i]), math.cos(headings[i])])
            points.append(points[-1] + step)
        self.points = np.array(points)
        self.arc = ds * np.arange(n)
        self.headings = headings
        self.length = float(self.arc[-1])

    def state(self, s):
        s = np.clip(s, 0.0, self.length)
        x = np.interp(s, self.arc, self.points[:, 0])
        y = np.interp(s, self.arc, self.points[:, 1])
        h = np.interp(s, self.arc, self.headings)
        return np.stack(np.broadcast_arrays(x, y), axis=-1), h

    def offset_point(self, s, offset):
        center, h = self.state(s)
        normal = np.stack(
            np.broadcast_arrays(np.cos(h), -np.sin(h)), axis=-1
        )
        return center + np.asarray(offset)[..., None] * normal, h


def _smooth_noise(rng, shape, scale_cells: float, amplitude: float) -> np.ndarray:
    """Bilinearly upsampled coarse noise, one field per colour channel."""
    ny, nx = shape
    cy = max(2, int(ny / scale_cells) + 2)
    cx = max(2, int(nx / scale_cells) + 2)
    fields = []
    for _ in range(3):
        coarse = rng.normal(0.0, 1.0, (cy, cx))
        yy = np.linspace(0, cy - 1.001, ny)
        xx = np.linspace(0, cx - 1.001, nx)
        y0 = np.floor(yy).astype(int)
        x0 = np.floor(xx).astype(int)
        wy = (yy - y0)[:, None]
        wx = (xx - x0)[None, :]
        f = (
            coarse[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
            + coarse[np.ix_(y0, x0 + 1)] * (1 - wy) * wx
            + coarse[np.ix_(y0 + 1, x0)] * wy * (1 - wx)
            + coarse[np.ix_(y0 + 1, x0 + 1)] * wy * wx
        )
        fields.append(amplitude * f)
    return np.stack(fields, axis=-1)


def build_texture(layers: dict, seed: int, params: SceneParams) -> TextureField:
    """Rasterise the layer colours plus seeded smooth noise.

    Deterministic given (layers, seed, params); rebuilding from a
    serialised scene document reproduces the field exactly.
    """
    res = params.texture_resolution
    all_pts = np.vstack([poly for polys in layers.values() for poly in polys])
    pad = 12.0
    x0 = math.floor((all_pts[:, 0].min() - pad) / res) * res
    y0 = math.floor((all_pts[:, 1].min() - pad) / res) * res
    x1 = math.ceil((all_pts[:, 0].max() + pad) / res) * res
    y1 = math.ceil((all_pts[:, 1].max() + pad) / res) * res
    nx = int(round((x1 - x0) / res))
    ny = int(round((y1 - y0) / res))

    xs = x0 + (np.arange(nx) + 0.5) * res
    ys = y0 + (np.arange(ny) + 0.5) * res
    gx, gy = np.meshgrid(xs, ys)
    centers = np.stack([gx, gy], axis=-1)

    rgb = np.empty((ny, nx, 3))
    rgb[:] = PALETTE["offroad"]
    # Paint order puts crossings on top of the road surface.
    for name in ("drivable", "walkway", "carpark", "crossing"):
        inside = points_in_polygons(centers, layers.get(name, []))
        rgb[inside] = PALETTE[name]

    noise_rng = np.random.default_rng([seed, 7919])
    rgb = rgb + _smooth_noise(
        noise_rng, (ny, nx), params.noise_scale / res, params.noise_amplitude
    )
    return TextureField(np.array([x0, y0]), res, np.clip(rgb, 0.0, 1.0))


def _sample_positions(rng, lo, hi, count, min_gap):
    """Up to `count` positions in [lo, hi] pairwise at least `min_gap` apart."""
    chosen = []
    for _ in range(count * 8):
        if len(chosen) == count:
            break
        s = rng.uniform(lo, hi)
        if all(abs(s - c) >= min_gap for c in chosen):
            chosen.append(s)
    return chosen


def _object_waypoints(center_fn, times):
    rows = []
    for t in times:
        (x, y), heading = center_fn(t)
        rows.append([t, x, y, heading])
    return np.array(rows)


def generate_scene(seed: int, params: SceneParams | None = None) -> Scene:
    """Procedurally build a scene; identical output for identical inputs."""
    params = params or SceneParams()
    params.validate()
    rng = np.random.default_rng(seed)

    line = _Centerline(rng, params)
    road_w = rng.uniform(*params.road_width_range)
    half = road_w / 2.0
    walk_w = params.walkway_width

    layers = {
        "drivable": [_strip_polygon(line.points, line.headings, -half, half)],
        "walkway": [
            _strip_polygon(line.points, line.headings, half, half + walk_w),
            _strip_polygon(line.points, line.headings, -half - walk_w, -half),
        ],
        "crossing": [],
        "carpark": [],
    }

    # Crossings along the road, axis-aligned with the local road direction.
    # Their lateral extent stops a few centimetres short of the road edge so
    # the straight quad stays strictly inside the corridor even where it
    # chords across a bend of the polyline band.
    cross_half = half - 0.08
    s = rng.uniform(8.0, 16.0)
    crossing_arcs = []
    while s < line.length - 8.0:
        stations = np.array([s, s, s + params.crossing_depth, s + params.crossing_depth])
        offsets = np.array([-cross_half, cross_half, cross_half, -cross_half])
        corners, _ = line.offset_point(stations, offsets)
        layers["crossing"].append(_ccw(corners))
        crossing_arcs.append(s + params.crossing_depth / 2.0)
        s += rng.uniform(*params.crossing_spacing_range)
    if not crossing_arcs:
        raise GenerationError("road too short to place a single crossing")

    # Car-park lobes beyond the walkway.
    s = rng.uniform(10.0, 25.0)
    while s < line.length - 20.0:
        if rng.uniform() < params.carpark_probability:
            length = rng.uniform(*params.carpark_length_range)
            side = 1.0 if rng.uniform() < 0.5 else -1.0
            lo = side * (half + walk_w)
            hi = side * (half + walk_w + params.carpark_depth)
            seg = (line.arc >= s) & (line.arc <= s + length)
            if seg.sum() >= 2:
                layers["carpark"].append(
                    _strip_polygon(
                        line.points[seg], line.headings[seg], min(lo, hi), max(lo, hi)
                    )
                )
        s += rng.uniform(25.0, 40.0)

    texture = build_texture(layers, seed, params)

    # Ego trajectory along its lane.
    n_steps = int(math.floor(params.duration / params.timestep)) + 1
    times = np.arange(n_steps) * params.timestep
    ego_offset = params.ego_lane_fraction * road_w
    ego_arc = params.margin + params.ego_speed * times
    if ego_arc[-1] > line.length - params.margin + 1e-6:
        raise GenerationError("ego trajectory exceeds the generated road")
    ego_pts, ego_heads = line.offset_point(ego_arc, np.full(n_steps, ego_offset))
    ego_poses = [
        heading_pose(p[0], p[1], h) for p, h in zip(ego_pts, ego_heads)
    ]

    def ego_position(t):
        arc = params.margin + params.ego_speed * t
        pts, _ = line.offset_point(np.array([arc]), np.array([ego_offset]))
        return pts[0]

    def clear_of_ego(obj: DynamicObject, clearance: float = 2.4) -> bool:
        for t in times:
            pos, _ = obj.state_at(t)
            if np.linalg.norm(pos - ego_position(t)) < clearance:
                return False
        return True

    objects = []

    def try_add(obj):
        if clear_of_ego(obj):
            objects.append(obj)

    # Oncoming traffic on the opposite lane, plus parked vehicles at the
    # far road edge.
    for cls, count_range in (("car", params.car_count_range), ("truck", params.truck_count_range)):
        width, length, height = OBJECT_DIMENSIONS[cls]
        n_total = int(rng.integers(count_range[0], count_range[1] + 1))
        arcs = _sample_positions(rng, 10.0, line.length - 10.0, n_total, length + 8.0)
        for s0 in arcs:
            parked = rng.uniform() < params.parked_fraction
            if parked:
                offset = -(half - width / 2.0 - 0.3)

                def parked_center(t, s0=s0, offset=offset):
                    pts, h = line.offset_point(np.array([s0]), np.array([offset]))
                    return pts[0], h[0]

                waypoints = _object_waypoints(parked_center, times)
            else:
                speed = rng.uniform(4.0, 9.0)
                offset = -road_w / 4.0

                def moving_center(t, s0=s0, speed=speed, offset=offset, length=length):
                    arc = np.clip(s0 - speed * t, length / 2.0 + 1.0,
                                  line.length - length / 2.0 - 1.0)
                    pts, h = line.offset_point(np.array([arc]), np.array([offset]))
                    return pts[0], h[0] + math.pi

                waypoints = _object_waypoints(moving_center, times)
            try_add(DynamicObject(cls, width, length, height, waypoints))

    # Pedestrians shuttling across at the crossings.
    width, length, height = OBJECT_DIMENSIONS["pedestrian"]
    n_peds = int(rng.integers(*params.pedestrian_count_range, endpoint=True))
    for _ in range(n_peds):
        s0 = crossing_arcs[int(rng.integers(0, len(crossing_arcs)))]
        limit = half - 0.6
        start = rng.uniform(-limit, limit)
        velocity = rng.uniform(0.3, 1.1) * (1.0 if rng.uniform() < 0.5 else -1.0)

        def ped_center(t, s0=s0, start=start, velocity=velocity, limit=limit):
            span = 2.0 * limit
            raw = start + limit + velocity * t
            wrapped = raw % (2.0 * span)
            offset = (wrapped if wrapped <= span else 2.0 * span - wrapped) - limit
            pts, h = line.offset_point(np.array([s0]), np.array([offset]))
            return pts[0], h[0]

        try_add(DynamicObject("pedestrian", width, length, height,
                              _object_waypoints(ped_center, times)))

    # Tall occluders beside the road.
    occluders = []
    n_occ = int(rng.integers(*params.occluder_count_range, endpoint=True))
    arcs = _sample_positions(rng, 12.0, line.length - 12.0, n_occ, 9.0)
    for s0 in arcs:
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        depth_off = half + walk_w + rng.uniform(0.8, 5.0)
        size_x = rng.uniform(2.0, 5.0)
        size_y = rng.uniform(2.0, 5.0)
        center, h = line.offset_point(
            np.array([s0]), np.array([side * (depth_off + size_x / 2.0)])
        )
        occluders.append(
            Obstacle(
                rectangle_footprint(center[0], h[0], size_x, size_y),
                rng.uniform(2.5, 5.0),
            )
        )

    return Scene(
        layers=layers,
        texture=texture,
        objects=objects,
        occluders=occluders,
        ego_timestamps=times,
        ego_poses=ego_poses,
        seed=seed,
        params=params,
    )


def _ray_blocking(origin, directions, s_ground, vertices, height):
    """Entry parameter of each ray into a convex prism, or +inf.

    Rays are ``origin + s * direction``; feasibility is the intersection of
    the footprint's half-plane constraints and the height slab, each linear
    in ``s``, clipped against ``(epsilon, s_ground]``.
    """
    lo = np.full(directions.shape[:-1], 1e-6)
    hi = s_ground.copy()

    def apply(alpha, beta):
        nonlocal lo, hi
        pos = beta > 1e-12
        neg = beta < -1e-12
        flat = ~pos & ~neg
        bound = np.where(pos | neg, -alpha / np.where(np.abs(beta) < 1e-12, 1.0, beta), 0.0)
        lo = np.where(pos, np.maximum(lo, bound), lo)
        hi = np.where(neg, np.minimum(hi, bound), hi)
        infeasible = flat & (alpha < 0)
        hi = np.where(infeasible, -np.inf, hi)

    n = len(vertices)
    for i in range(n):
        a = vertices[i]
        b = vertices[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]
        alpha = ex * (origin[1] - a[1]) - ey * (origin[0] - a[0])
        beta = ex * directions[..., 1] - ey * directions[..., 0]
        apply(alpha, beta)
    # 0 <= z <= height with z = origin_z + s * dz.
    apply(origin[2] - 0.0, directions[..., 2])
    apply(height - origin[2], -directions[..., 2])

    entry = np.where(hi >= lo, lo, np.inf)
    return entry


def render_frame(scene: Scene, camera: PinholeCamera, pose: Pose, timestamp: float) -> np.ndarray:
    """Render the scene from a camera pose given in world coordinates.

    Returns an (H, W, 3) float image in [0, 1].
    """
    h, w = camera.image_height, camera.image_width
    us, vs = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    d_cam = np.stack(
        [(us - camera.cx) / camera.fx, (camera.cy - vs) / camera.fy, np.ones_like(us)],
        axis=-1,
    )
    d_world = d_cam @ pose.rotation.T
    origin = pose.translation

    dz = d_world[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        s_ground = np.where(dz < 0, -origin[2] / dz, np.inf)
        ground_xy = origin[:2] + s_ground[..., None] * d_world[..., :2]
    hits_ground = np.isfinite(s_ground)
    image = np.empty((h, w, 3))
    image[:] = PALETTE["sky"]
    if hits_ground.any():
        image[hits_ground] = scene.texture.sample(ground_xy[hits_ground])

    nearest = s_ground.copy()
    for entity, color, height in _render_entities(scene, timestamp):
        entry = _ray_blocking(origin, d_world, s_ground, entity, height)
        closer = entry < nearest
        image[closer] = color
        nearest = np.where(closer, entry, nearest)
    return image


def _render_entities(scene: Scene, timestamp: float):
    for obj in scene.objects:
        yield obj.footprint_at(timestamp), PALETTE[obj.class_name], obj.height
    for occ in scene.occluders:
        yield occ.vertices, PALETTE["occluder"], occ.height


def bev_labels(scene: Scene, reference_pose: Pose, spec: GridSpec, timestamp: float) -> BevGrid:
    """Ground-truth label grid in the reference ego frame.

    Channels follow :data:`LABEL_CHANNELS`: one binary map per static class
    (multi-label; crossings are also drivable), then a one-hot object block
    whose first channel is background.  Overlapping object footprints are
    resolved smallest-on-top.
    """
    centers = spec.cell_centers()
    world = reference_pose.transform(
        np.concatenate([centers, np.zeros(centers.shape[:-1] + (1,))], axis=-1)
    )[..., :2]

    n_static = len(STATIC_CLASSES)
    n_channels = n_static + 1 + len(OBJECT_CLASSES)
    data = np.zeros((spec.rows, spec.cols, n_channels))
    for i, name in enumerate(STATIC_CLASSES):
        data[..., i] = points_in_polygons(world, scene.layers.get(name, []))

    class_map = np.zeros((spec.rows, spec.cols), dtype=int)  # 0 = background
    order = sorted(scene.objects, key=lambda o: o.width * o.length, reverse=True)
    for obj in order:
        footprint = obj.footprint_at(timestamp)
        inside = Path(footprint).contains_points(world.reshape(-1, 2), radius=1e-9)
        class_map.reshape(-1)[inside] = 1 + obj.class_index
    for k in range(1 + len(OBJECT_CLASSES)):
        data[..., n_static + k] = class_map == k

    return BevGrid(spec.with_channels(n_channels), data)


@dataclass(eq=False)
class ImageLabels:
    """Per-pixel labels warped from a BEV grid, plus their validity mask."""

    data: np.ndarray  # (H, W, C)
    valid: np.ndarray  # (H, W) bool


def image_labels(label_grid: BevGrid, warp, camera: PinholeCamera) -> ImageLabels:
    """Project BEV labels into the image by inverse warping.

    Pixels above the horizon or mapping outside the label grid are invalid
    (excluded from image-level supervision).  Lookup is nearest-cell.
    """
    from .camera import Homography

    matrix = warp.m if isinstance(warp, Homography) else np.asarray(warp, dtype=float)
    inverse = np.linalg.inv(matrix)

    h, w = camera.image_height, camera.image_width
    us, vs = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    pix = np.stack([us, vs, np.ones_like(us)], axis=-1)
    ground_h = pix @ inverse.T
    with np.errstate(divide="ignore", invalid="ignore"):
        ground = ground_h[..., :2] / ground_h[..., 2:3]

    # A pixel is below the horizon exactly when its ground point re-projects
    # with positive depth through the forward map.
    forward = np.concatenate([ground, np.ones(ground.shape[:-1] + (1,))], axis=-1) @ matrix.T
    below_horizon = np.isfinite(ground).all(axis=-1) & (forward[..., 2] > 0)

    spec = label_grid.spec
    cols = np.floor(
        (ground[..., 0] - spec.lateral_min) / spec.resolution, where=below_horizon,
        out=np.full(ground.shape[:-1], -1.0),
    ).astype(int)
    rows = np.floor(
        (ground[..., 1] - spec.longitudinal_min) / spec.resolution, where=below_horizon,
        out=np.full(ground.shape[:-1], -1.0),
    ).astype(int)
    in_grid = (rows >= 0) & (rows < spec.rows) & (cols >= 0) & (cols < spec.cols)
    valid = below_horizon & in_grid

    data = np.zeros((h, w, spec.channels))
    data[valid] = label_grid.data[rows[valid], cols[valid]]
    return ImageLabels(data, valid)


def make_sequence(
    scene: Scene,
    rig: CameraRig,
    n_frames: int,
    interval: int,
    reference_index: int | None = None,
    anchor: int | None = None,
    interval_range: tuple | None = None,
    rng=None,
) -> list:
    """Render a temporal frame sequence with poses relative to the reference.

    Frames sit ``interval`` trajectory steps apart, with frame
    ``reference_index`` (default: the last frame) anchored at trajectory
    sample ``anchor`` (default: the final sample).  When ``interval_range``
    and ``rng`` are given the interval is redrawn uniformly once per
    sequence, the training-time augmentation.
    """
    if n_frames < 1:
        raise ValueError("need at least one frame")
    if reference_index is None:
        reference_index = n_frames - 1
    if not 0 <= reference_index < n_frames:
        raise IndexError(f"reference index {reference_index} outside 0..{n_frames - 1}")
    if interval_range is not None:
        if rng is None:
            raise ValueError("interval_range needs an rng")
        interval = int(rng.integers(interval_range[0], interval_range[1] + 1))
    if interval < 1:
        raise ValueError("interval must be >= 1")

    n_traj = len(scene.ego_timestamps)
    if anchor is None:
        anchor = n_traj - 1
    indices = [anchor + (k - reference_index) * interval for k in range(n_frames)]
    if indices[0] < 0 or indices[-1] >= n_traj:
        raise TrajectoryTooShortError(
            f"frame indices {indices} outside trajectory of length {n_traj}"
        )

    ref_world = scene.ego_poses[indices[reference_index]]
    ref_inverse = ref_world.inverse()
    frames = []
    for k, idx in enumerate(indices):
        t = float(scene.ego_timestamps[idx])
        world_pose = scene.ego_poses[idx]
        image = render_frame(scene, rig.camera, world_pose.compose(rig.mount), t)
        rel = Pose.identity() if k == reference_index else ref_inverse.compose(world_pose)
        frames.append(Frame(image=image, camera=rig.camera, pose=rel, timestamp=t, index=k))
    return frames


def scene_to_dict(scene: Scene) -> dict:
    """Structured-document form: polygons, actors, trajectory and seed."""
    return {
        "seed": int(scene.seed),
        "params": asdict(scene.params),
        "layers": {
            name: [np.asarray(p).tolist() for p in polys]
            for name, polys in scene.layers.items()
        },
        "objects": [
            {
                "class": o.class_name,
                "width": float(o.width),
                "length": float(o.length),
                "height": float(o.height),
                "waypoints": np.asarray(o.waypoints).tolist(),
            }
            for o in scene.objects
        ],
        "occluders": [
            {"vertices": np.asarray(o.vertices).tolist(), "height": float(o.height)}
            for o in scene.occluders
        ],
        "ego": [
            [float(t), float(p.translation[0]), float(p.translation[1]),
             float(math.atan2(p.rotation[0, 1], p.rotation[1, 1]))]
            for t, p in zip(scene.ego_timestamps, scene.ego_poses)
        ],
    }


def scene_from_dict(doc: dict) -> Scene:
    """Rebuild a scene (texture included) from its document form."""
    params_fields = {k: tuple(v) if isinstance(v, list) else v for k, v in doc["params"].items()}
    params = SceneParams(**params_fields)
    layers = {
        name: [np.array(p, dtype=float) for p in polys]
        for name, polys in doc["layers"].items()
    }
    objects = [
        DynamicObject(
            class_name=o["class"],
            width=o["width"],
            length=o["length"],
            height=o["height"],
            waypoints=np.array(o["waypoints"], dtype=float),
        )
        for o in doc["objects"]
    ]
    occluders = [
        Obstacle(np.array(o["vertices"], dtype=float), o["height"])
        for o in doc["occluders"]
    ]
    ego = np.array(doc["ego"], dtype=float)
    return Scene(
        layers=layers,
        texture=build_texture(layers, doc["seed"], params),
        objects=objects,
        occluders=occluders,
        ego_timestamps=ego[:, 0].copy(),
        ego_poses=[heading_pose(x, y, h) for _, x, y, h in ego],
        seed=int(doc["seed"]),
        params=params,
    )


def occluders_in_frame(scene: Scene, ego_world: Pose) -> list:
    """Scene occluders re-expressed in an ego frame (for the range sensor)."""
    inv = ego_world.inverse()
    out = []
    for occ in scene.occluders:
        verts3 = np.concatenate([occ.vertices, np.zeros((len(occ.vertices), 1))], axis=1)
        local = inv.transform(verts3)[:, :2]
        out.append(Obstacle(_ccw(local), occ.height))
    return out
