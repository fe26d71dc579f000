"""Pinhole camera model, rigid poses, and ground-plane homographies.

Coordinate conventions used throughout the package:

* World / ego frame: ``x`` lateral (positive right), ``y`` longitudinal
  (positive forward), ``z`` up.  The ground is the plane ``z = plane_height``
  (``0`` by default).
* Camera frame: right-handed with ``z`` along the optical axis (positive
  depth in front of the camera), ``x`` along the image "right" direction and
  ``y`` along the image "up" direction.  A point ``(x, y, z)`` in camera
  coordinates with ``z > 0`` lands at pixel::

      u = cx + fx * x / z
      v = cy - fy * y / z

  i.e. the pixel row grows downwards while the camera ``y`` axis points up.
  With this choice a top-down view maps the ground plane onto the image like
  a chart (orientation preserving) while keeping rotation matrices proper.
* Pixels: ``u`` is the column coordinate, ``v`` the row coordinate; integer
  coordinates sit at pixel centres, the raster spans ``[0, W) x [0, H)``.

The ground-plane homography ``H`` returned here maps homogeneous ground
coordinates ``(x, y, 1)`` in metres to homogeneous pixels ``(u, v, 1)``; its
homogeneous scale is chosen so the third component equals the camera-frame
depth of the point, so ``w > 0`` means "in front of the camera".
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfigurationError, DegenerateViewError

_ORTHONORMAL_TOL = 1e-9
# Relative spread of the smallest singular value below which a four-point
# correspondence set is treated as degenerate.
_DLT_RANK_RTOL = 1e-9


@dataclass(frozen=True)
class PinholeCamera:
    """Intrinsics of an ideal (distortion-free) pinhole camera."""

    fx: float
    fy: float
    cx: float
    cy: float
    image_width: int
    image_height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("raster dimensions must be positive")
        if not (0 <= self.cx < self.image_width):
            raise ValueError("principal point cx outside the raster")
        if not (0 <= self.cy < self.image_height):
            raise ValueError("principal point cy outside the raster")

    def pixel_projection(self) -> np.ndarray:
        """3x3 matrix taking camera coordinates to homogeneous pixels.

        Includes the row flip of the package convention (image ``v`` grows
        downwards while camera ``y`` points up).
        """
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, -self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def contains_pixel(self, u, v) -> np.ndarray:
        """Vectorised raster membership test for continuous pixel coords."""
        u = np.asarray(u)
        v = np.asarray(v)
        return (u >= 0) & (u < self.image_width) & (v >= 0) & (v < self.image_height)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform mapping one frame's coordinates into another's.

    ``rotation`` (3x3, proper orthonormal) and ``translation`` (3,) satisfy
    ``p_out = rotation @ p_in + translation``.  Used both for ego motion
    (frame ego -> reference ego) and for camera placement (camera -> ego).
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValueError("pose entries must be finite")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHONORMAL_TOL:
            raise ValueError("rotation must be proper (det +1)")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        """Transform applying ``other`` first, then ``self``."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def transform(self, points) -> np.ndarray:
        """Apply the transform to an (..., 3) array of points."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def rotate(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T


@dataclass(frozen=True, eq=False)
class Homography:
    """Plane-to-image projective map, defined up to scale.

    The stored matrix keeps whatever scale its constructor chose (for maps
    produced by this module the third homogeneous output component is the
    camera depth).  Use :meth:`canonical` before comparing homographies.
    """

    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=float)
        if m.shape != (3, 3):
            raise ValueError("homography must be 3x3")
        if not np.all(np.isfinite(m)):
            raise ValueError("homography entries must be finite")
        # Scale-relative non-singularity check so that rescaling (e.g. to
        # unit Frobenius norm during canonicalization) cannot flip validity.
        scale = np.linalg.norm(m)
        if scale == 0 or abs(np.linalg.det(m)) <= 1e-12 * scale**3:
            raise ValueError("homography is singular")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    def canonical(self) -> "Homography":
        """Scale-normalised form used for equality comparisons.

        The bottom-right entry is scaled to 1 when it is non-negligible;
        otherwise the matrix is scaled to unit Frobenius norm with the first
        non-zero entry (row-major order) made positive.
        """
        m = self.m
        if abs(m[2, 2]) > 1e-9:
            return Homography(m / m[2, 2])
        f = m / np.linalg.norm(m)
        for value in f.ravel():
            if abs(value) > 1e-12:
                if value < 0:
                    f = -f
                break
        return Homography(f)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def apply(self, points) -> np.ndarray:
        """Map (..., 2) euclidean points through the homography.

        Returns euclidean outputs; callers that care about the side of the
        camera should use :meth:`apply_with_depth`.
        """
        xy, w = self.apply_with_depth(points)
        return xy

    def apply_with_depth(self, points):
        """Return mapped (..., 2) points together with the homogeneous depth."""
        pts = np.asarray(points, dtype=float)
        ones = np.ones(pts.shape[:-1] + (1,))
        h = np.concatenate([pts, ones], axis=-1) @ self.m.T
        w = h[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            xy = h[..., :2] / w[..., None]
        return xy, w


@dataclass(frozen=True, eq=False)
class Correspondence:
    """A ground-plane point (metres) paired with its image pixel."""

    bev_point: np.ndarray
    image_point: np.ndarray

    def __post_init__(self):
        b = np.array(self.bev_point, dtype=float).reshape(2)
        p = np.array(self.image_point, dtype=float).reshape(2)
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(p))):
            raise ValueError("correspondence coordinates must be finite")
        b.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "bev_point", b)
        object.__setattr__(self, "image_point", p)


def analytic_ground_homography(
    camera: PinholeCamera, pose: Pose, plane_height: float = 0.0
) -> Homography:
    """Exact homography from camera intrinsics and a camera-to-reference pose.

    ``pose`` maps camera coordinates into the reference ego frame.  The
    result maps ground points ``(x, y)`` on the plane ``z = plane_height``
    to pixels, with homogeneous depth equal to the camera-frame depth.

    Raises :class:`DegenerateViewError` when the camera centre lies on the
    plane, in which case the plane images to a single line.
    """
    if abs(pose.translation[2] - plane_height) < 1e-9:
        raise DegenerateViewError(
            "camera centre lies on the ground plane; the plane projects to a line"
        )
    world_to_cam = pose.rotation.T
    offset = plane_height * world_to_cam[:, 2] - world_to_cam @ pose.translation
    plane_to_cam = np.column_stack([world_to_cam[:, 0], world_to_cam[:, 1], offset])
    return Homography(camera.pixel_projection() @ plane_to_cam)


def _normalising_similarity(points: np.ndarray) -> np.ndarray:
    """Similarity transform moving points to centroid 0, RMS radius sqrt(2)."""
    centroid = points.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((points - centroid) ** 2, axis=1)))
    scale = np.sqrt(2.0) / max(rms, 1e-300)
    return np.array(
        [
            [scale, 0.0, -scale * centroid[0]],
            [0.0, scale, -scale * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )


def homography_from_correspondences(pairs) -> Homography:
    """Estimate the homography joining exactly four point correspondences.

    Classic direct linear transform on normalised coordinates: both point
    sets are translated to their centroid and scaled to RMS radius sqrt(2),
    the 8x9 linear system is solved by SVD, and the conditioning transforms
    are undone afterwards.  The scale sign is fixed so the construction
    points come out with positive homogeneous depth.

    Raises :class:`DegenerateConfigurationError` when the system is rank
    deficient (three collinear points, coincident points, ...).
    """
    pairs = list(pairs)
    if len(pairs) != 4:
        raise ValueError(f"exactly four correspondences required, got {len(pairs)}")
    bev = np.array([p.bev_point for p in pairs], dtype=float)
    img = np.array([p.image_point for p in pairs], dtype=float)

    t_bev = _normalising_similarity(bev)
    t_img = _normalising_similarity(img)
    bev_n = (np.column_stack([bev, np.ones(4)]) @ t_bev.T)[:, :2]
    img_n = (np.column_stack([img, np.ones(4)]) @ t_img.T)[:, :2]

    a = np.zeros((8, 9))
    for i in range(4):
        x, y = bev_n[i]
        u, v = img_n[i]
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u]
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, -v]

    _, sigma, vt = np.linalg.svd(a)
    if sigma[-1] < _DLT_RANK_RTOL * sigma[0]:
        raise DegenerateConfigurationError(
            "correspondences do not determine a homography (rank-deficient system)"
        )
    h_n = vt[-1].reshape(3, 3)
    m = np.linalg.inv(t_img) @ h_n @ t_bev

    depths = np.column_stack([bev, np.ones(4)]) @ m.T[:, 2]
    if np.sum(depths) < 0:
        m = -m
    try:
        return Homography(m)
    except ValueError as exc:
        raise DegenerateConfigurationError(str(exc)) from exc


def perturb_correspondences(pairs, noise_std: float, seed: int):
    """Add zero-mean Gaussian noise to the ground-side of each correspondence.

    Only ``bev_point`` is perturbed; image pixels stay exact.  The draw is
    deterministic for a fixed seed, and the same seed yields the same unit
    noise scaled by ``noise_std`` so sweeps over the noise level share their
    random directions.  ``noise_std == 0`` returns the inputs unchanged.
    """
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    pairs = list(pairs)
    rng = np.random.default_rng(seed)
    unit = rng.standard_normal((len(pairs), 2))
    if noise_std == 0:
        return pairs
    return [
        Correspondence(p.bev_point + noise_std * unit[i], p.image_point)
        for i, p in enumerate(pairs)
    ]


def ground_to_pixels(camera: PinholeCamera, pose: Pose, points, plane_height: float = 0.0):
    """Project (..., 2) ground-plane points to pixels.

    Returns ``(uv, depth)`` where ``depth`` is the camera-frame depth; points
    with ``depth <= 0`` are behind the camera and their pixel coordinates are
    not meaningful.
    """
    pts = np.asarray(points, dtype=float)
    world = np.concatenate(
        [pts, np.full(pts.shape[:-1] + (1,), float(plane_height))], axis=-1
    )
    cam = (world - pose.translation) @ pose.rotation
    depth = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.cx + camera.fx * cam[..., 0] / depth
        v = camera.cy - camera.fy * cam[..., 1] / depth
    return np.stack([u, v], axis=-1), depth


def pixels_to_ground(camera: PinholeCamera, pose: Pose, pixels, plane_height: float = 0.0):
    """Back-project (..., 2) pixels onto the ground plane.

    Returns ``(xy, valid)``; ``valid`` is False where the viewing ray does
    not meet the plane in front of the camera (at or above the horizon).
    """
    px = np.asarray(pixels, dtype=float)
    d_cam = np.stack(
        [
            (px[..., 0] - camera.cx) / camera.fx,
            (camera.cy - px[..., 1]) / camera.fy,
            np.ones(px.shape[:-1]),
        ],
        axis=-1,
    )
    d_world = d_cam @ pose.rotation.T
    dz = d_world[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (plane_height - pose.translation[2]) / dz
    valid = np.isfinite(s) & (s > 0)
    s_safe = np.where(valid, s, 0.0)
    xy = pose.translation[:2] + s_safe[..., None] * d_world[..., :2]
    return xy, valid


def project_ground_to_image(
    camera: PinholeCamera, pose: Pose, ground_point, plane_height: float = 0.0
):
    """Project one ground point to its pixel, or None when out of view.

    Out of view means behind the camera (non-positive depth) or outside the
    raster ``[0, W) x [0, H)``.
    """
    uv, depth = ground_to_pixels(camera, pose, np.asarray(ground_point), plane_height)
    if depth <= 0 or not camera.contains_pixel(uv[0], uv[1]):
        return None
    return uv


def project_image_to_ground(
    camera: PinholeCamera, pose: Pose, pixel, plane_height: float = 0.0
):
    """Intersect one pixel's viewing ray with the ground plane.

    Returns the ground point ``(x, y)`` or None when the ray points at or
    above the horizon (no intersection in front of the camera).
    """
    xy, valid = pixels_to_ground(camera, pose, np.asarray(pixel), plane_height)
    if not valid:
        return None
    return xy


def ground_correspondences(camera: PinholeCamera, pose: Pose, pixels, plane_height: float = 0.0):
    """Build exact correspondences by back-projecting the given pixels.

    All pixels must map to ground points in front of the camera.
    """
    out = []
    for px in pixels:
        xy = project_image_to_ground(camera, pose, px, plane_height)
        if xy is None:
            raise DegenerateViewError(f"pixel {px} does not meet the ground plane")
        out.append(Correspondence(xy, np.asarray(px, dtype=float)))
    return out
