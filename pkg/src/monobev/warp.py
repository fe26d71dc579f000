"""Image-to-BEV warping and FOV-masked temporal aggregation.

Image rasters are plain ``(height, width, channels)`` float arrays with
values sampled at integer pixel centres.  Warping pulls values onto a BEV
lattice: each cell centre is pushed through the plane-to-image homography
and the raster is sampled bilinearly at the resulting pixel.  Cells whose
sample point has non-positive homogeneous depth (behind the camera) or
whose four bilinear neighbours are not all inside the raster receive the
grid's fill value.

Aggregation combines per-frame grids under their FOV masks.  In ``max``
mode each cell takes the maximum masked value across frames; in ``mean``
mode the masked values are averaged over the number of contributing
frames.  Both modes are exactly invariant to frame ordering: the mean sums
each cell's contributions in sorted order, so no floating-point reordering
effects can leak in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Homography, PinholeCamera, Pose, ground_to_pixels
from .errors import ShapeMismatchError, SingularWarpError
from .grid import BevGrid, FovMask, GridSpec


def _warp_matrix(warp) -> np.ndarray:
    if isinstance(warp, Homography):
        m = warp.m
    else:
        m = np.asarray(warp, dtype=float)
        if m.shape != (3, 3):
            raise ShapeMismatchError("warp matrix must be 3x3")
    scale = np.linalg.norm(m)
    if not np.all(np.isfinite(m)) or scale == 0 or abs(np.linalg.det(m)) < 1e-12 * scale**3:
        raise SingularWarpError("warp matrix is singular")
    return m


def _as_raster(image) -> np.ndarray:
    raster = np.asarray(image, dtype=float)
    if raster.ndim == 2:
        raster = raster[:, :, None]
    if raster.ndim != 3:
        raise ShapeMismatchError(f"image raster must be HxWxC, got shape {raster.shape}")
    return raster


def _bilinear_sample(raster: np.ndarray, u, v):
    """Sample at continuous pixel coords; returns (values, in_raster).

    Membership is the half-open pixel box ``[0, width) x [0, height)`` --
    the same test :meth:`PinholeCamera.contains_pixel` applies -- so every
    point a view mask admits gets a value.  Coordinates in the outer
    half-pixel band clamp to the edge texel; interior points interpolate
    their four neighbours.  Values are zero where invalid.
    """
    h, w = raster.shape[:2]
    valid = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    x0c = np.clip(np.floor(uc).astype(int), 0, max(w - 2, 0))
    y0c = np.clip(np.floor(vc).astype(int), 0, max(h - 2, 0))
    x1 = np.minimum(x0c + 1, w - 1)
    y1 = np.minimum(y0c + 1, h - 1)
    fx = uc - x0c
    fy = vc - y0c
    tl = raster[y0c, x0c]
    tr = raster[y0c, x1]
    bl = raster[y1, x0c]
    br = raster[y1, x1]
    fx = fx[..., None]
    fy = fy[..., None]
    values = (
        tl * (1 - fx) * (1 - fy)
        + tr * fx * (1 - fy)
        + bl * (1 - fx) * fy
        + br * fx * fy
    )
    values = np.where(valid[..., None], values, 0.0)
    return values, valid


def warp_to_bev(
    warp,
    image,
    spec: GridSpec,
    fill_value: float = 0.0,
    stride: int = 1,
) -> BevGrid:
    """Pull an image raster onto a BEV lattice through a homography.

    ``warp`` maps ground metres ``(lateral, longitudinal, 1)`` to
    homogeneous pixels and may be a :class:`Homography` or a raw 3x3
    matrix.  ``stride`` samples every stride-th cell and replicates the
    value over the skipped block (a cheap stand-in for coarser feature
    maps); the default of 1 samples every cell.
    """
    m = _warp_matrix(warp)
    raster = _as_raster(image)
    if stride < 1:
        raise ValueError("stride must be >= 1")

    centers = spec.cell_centers()[::stride, ::stride]
    ones = np.ones(centers.shape[:-1] + (1,))
    projected = np.concatenate([centers, ones], axis=-1) @ m.T
    depth = projected[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = projected[..., 0] / depth
        v = projected[..., 1] / depth
    in_front = depth > 0
    u = np.where(in_front, u, -1.0)
    v = np.where(in_front, v, -1.0)

    values, in_raster = _bilinear_sample(raster, u, v)
    ok = in_front & in_raster
    coarse = np.where(ok[..., None], values, float(fill_value))

    if stride > 1:
        coarse = np.repeat(np.repeat(coarse, stride, axis=0), stride, axis=1)
        coarse = coarse[: spec.rows, : spec.cols]

    out_spec = spec.with_channels(raster.shape[2])
    return BevGrid(out_spec, coarse, fill_value=float(fill_value))


def fov_mask(camera: PinholeCamera, pose: Pose, spec: GridSpec) -> FovMask:
    """Cells whose centre projects inside the raster with positive depth."""
    centers = spec.cell_centers()
    uv, depth = ground_to_pixels(camera, pose, centers)
    visible = (depth > 0) & camera.contains_pixel(uv[..., 0], uv[..., 1])
    return FovMask(spec, visible)


def _check_stack(grids, masks):
    if len(grids) == 0:
        raise ShapeMismatchError("aggregation requires at least one frame")
    if len(grids) != len(masks):
        raise ShapeMismatchError(
            f"{len(grids)} grids but {len(masks)} masks"
        )
    spec = grids[0].spec
    for g in grids[1:]:
        if not spec.same_lattice(g.spec) or g.spec.channels != spec.channels:
            raise ShapeMismatchError("all grids must share one lattice and channel count")
    for m in masks:
        if not spec.same_lattice(m.spec):
            raise ShapeMismatchError("masks must share the grids' lattice")
    return spec


def aggregate(grids, masks, mode: str = "max") -> BevGrid:
    """Combine per-frame BEV grids under their FOV masks.

    ``max`` keeps, per cell and channel, the largest masked value across
    frames (cells masked out everywhere fall back to the fill value of 0).
    ``mean`` divides the masked sum by the number of frames whose mask
    covers the cell.  Output order is independent of frame order, bit for
    bit.
    """
    spec = _check_stack(grids, masks)
    if mode not in ("max", "mean"):
        raise ValueError(f"unknown aggregation mode {mode!r}")

    stack = np.stack([g.data for g in grids])  # (n, rows, cols, ch)
    mask_stack = np.stack([m.data for m in masks])[..., None]
    masked = np.where(mask_stack, stack, 0.0)

    if mode == "max":
        data = masked.max(axis=0)
    else:
        counts = mask_stack.sum(axis=0)
        # Sort each cell's contributions before summing so the result is
        # identical under any frame permutation.
        ordered = np.sort(masked, axis=0)
        total = ordered.sum(axis=0)
        data = total / np.maximum(counts, 1)
    return BevGrid(spec.with_channels(stack.shape[-1]), data, fill_value=0.0)


@dataclass(eq=False)
class AggregatedBevFeatures:
    """Assembled per-cell input for the BEV heads.

    Channel layout (slices into ``grid.data``): the reference frame's
    warped object heatmap, the max-aggregated static heatmaps, the
    max-aggregated image features, and the reference frame's masked
    features.  When heatmaps are skipped the first two slices are empty.
    """

    grid: BevGrid
    object_channels: slice
    static_channels: slice
    feature_channels: slice
    reference_channels: slice
    reference_index: int


def assemble_features(
    object_heatmap_bev,
    static_heatmaps_bev,
    feature_grids_bev,
    masks,
    reference_index: int,
    include_heatmaps: bool = True,
) -> AggregatedBevFeatures:
    """Stack the BEV-head input channels from warped per-frame grids.

    All inputs are already warped onto a shared lattice.  Heatmap grids are
    masked with their frame's FOV mask before use; the static heatmaps and
    image features are max-aggregated across frames while the object
    heatmap and the reference feature block come from the reference frame
    alone.  ``include_heatmaps=False`` drops the two heatmap blocks (used
    when no image-level heads are trained) leaving the 2F feature channels.
    """
    n = len(feature_grids_bev)
    if not 0 <= reference_index < n:
        raise IndexError(f"reference index {reference_index} outside 0..{n - 1}")
    if len(masks) != n:
        raise ShapeMismatchError(f"{n} feature grids but {len(masks)} masks")

    spec = _check_stack(feature_grids_bev, masks)
    ref_mask = masks[reference_index].data[..., None]

    feat_max = aggregate(feature_grids_bev, masks, mode="max")
    ref_feat = np.where(ref_mask, feature_grids_bev[reference_index].data, 0.0)

    blocks = []
    if include_heatmaps:
        if object_heatmap_bev is None or len(static_heatmaps_bev) != n:
            raise ShapeMismatchError(
                "heatmap assembly needs the reference object heatmap and one "
                "static heatmap per frame"
            )
        _check_stack(list(static_heatmaps_bev), masks)
        if not spec.same_lattice(object_heatmap_bev.spec):
            raise ShapeMismatchError("object heatmap lattice mismatch")
        obj = np.where(ref_mask, object_heatmap_bev.data, 0.0)
        static_max = aggregate(static_heatmaps_bev, masks, mode="max")
        blocks.append(obj)
        blocks.append(static_max.data)
        n_obj = obj.shape[-1]
        n_static = static_max.data.shape[-1]
    else:
        n_obj = 0
        n_static = 0

    blocks.append(feat_max.data)
    blocks.append(ref_feat)
    data = np.concatenate(blocks, axis=-1)

    f = feat_max.data.shape[-1]
    grid = BevGrid(spec.with_channels(data.shape[-1]), data, fill_value=0.0)
    return AggregatedBevFeatures(
        grid=grid,
        object_channels=slice(0, n_obj),
        static_channels=slice(n_obj, n_obj + n_static),
        feature_channels=slice(n_obj + n_static, n_obj + n_static + f),
        reference_channels=slice(n_obj + n_static + f, n_obj + n_static + 2 * f),
        reference_index=reference_index,
    )
