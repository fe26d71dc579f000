"""End-to-end plumbing from generated scenes to trained, scored grids.

A scene becomes a :class:`SceneSample`: a rendered frame window around a
reference frame, per-frame features and ground->pixel warps, FOV masks on
a working lattice grown to cover every frame, the label grid and the
visibility masks in the reference frame.  Samples feed the trainer (pixel
batches plus a grid assembler) and the evaluator (probabilities on the
target lattice, thresholded and scored under a visibility mask).

Frame windows are centred: the reference sits mid-window by default, so
later frames observe the far field from closer range — that, plus seeing
each cell several times, is what the temporal study measures.  Warps are
exact by default; a nonzero ``noise_std`` re-estimates each frame's
homography from four point correspondences whose ground coordinates are
perturbed (shared random directions across noise levels, so sweeps are
comparable), exactly the degradation the noise study measures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import (
    Homography,
    Pose,
    analytic_ground_homography,
    ground_correspondences,
    homography_from_correspondences,
    perturb_correspondences,
)
from .evaluation import EvaluationReport, evaluate, threshold_predictions
from .grid import BevGrid, ExtendedGridSpec, crop_mask_to_target, crop_to_target, extend_for_frames
from .model import Model, SampleBatch, TrainingSample, extract_features, new_model, train
from .occlusion import compute_occlusion_mask
from .scenario import ScenarioConfig
from .warp import aggregate, assemble_features, fov_mask, warp_to_bev
from .world import (
    OBJECT_CLASSES,
    STATIC_CLASSES,
    ImageLabels,
    Scene,
    bev_labels,
    generate_scene,
    image_labels,
    make_sequence,
    occluders_in_frame,
)

_SPLIT_OFFSETS = {"train": 0, "eval": 500_009}


def scene_seeds(config: ScenarioConfig, split: str) -> list:
    """Deterministic per-split scene seeds; the splits never overlap."""
    if split not in _SPLIT_OFFSETS:
        raise ValueError(f"unknown split {split!r}")
    count = config.train_scenes if split == "train" else config.eval_scenes
    base = config.seed * 1_000_003 + _SPLIT_OFFSETS[split]
    return [base + i for i in range(count)]


def generate_split(config: ScenarioConfig, split: str) -> list:
    return [generate_scene(seed, config.scene) for seed in scene_seeds(config, split)]


def _planar_matrix(pose: Pose) -> np.ndarray:
    """Homogeneous 2-D matrix of a planar (yaw + in-plane offset) pose."""
    m = np.eye(3)
    m[:2, :2] = pose.rotation[:2, :2]
    m[:2, 2] = pose.translation[:2]
    return m


def frame_warp(rig, frame, noise_std: float = 0.0, seed_parts=()) -> Homography:
    """Ground (reference ego metres) -> pixel homography for one frame.

    With zero noise this is the exact analytic map through the frame's
    pose and the camera mounting.  Otherwise the frame-local homography is
    re-estimated from four pixel/ground correspondences whose ground
    coordinates carry Gaussian noise of ``noise_std`` metres, then chained
    with the exact planar motion between the reference and the frame; the
    estimation error is the point of the noise study.
    """
    if noise_std == 0:
        return analytic_ground_homography(rig.camera, frame.pose.compose(rig.mount))
    w, h = rig.camera.image_width, rig.camera.image_height
    pixels = [
        (0.25 * w, 0.55 * h),
        (0.75 * w, 0.55 * h),
        (0.25 * w, 0.95 * h),
        (0.75 * w, 0.95 * h),
    ]
    pairs = ground_correspondences(rig.camera, rig.mount, pixels)
    noisy = perturb_correspondences(pairs, noise_std, seed=list(seed_parts))
    local = homography_from_correspondences(noisy)  # frame ground -> pixel
    motion = _planar_matrix(frame.pose.inverse())  # reference ground -> frame ground
    return Homography(local.m @ motion)


def reference_world_pose(scene: Scene, frame) -> Pose:
    """World pose of the trajectory sample the frame was rendered from."""
    stamps = np.asarray(scene.ego_timestamps, dtype=float)
    return scene.ego_poses[int(np.argmin(np.abs(stamps - frame.timestamp)))]


def scene_obstacles(scene: Scene, ego_world: Pose) -> list:
    """Ray-absorbing obstacles in the given ego frame.

    Only the tall roadside occluders absorb rays.  Cars, trucks and
    pedestrians are low enough that the simulated sensor sweeps over
    them, so their footprints stay scoreable -- the visibility criterion
    chiefly reacts to building-sized geometry.
    """
    return occluders_in_frame(scene, ego_world)


@dataclass(eq=False)
class SceneSample:
    """One scene prepared for training or evaluation."""

    scene_seed: int
    frames: list
    reference_index: int
    features: list  # per-frame (H, W, F) float32 pixel features
    warps: list  # per-frame Homography, reference ground -> pixel
    extended: ExtendedGridSpec
    fov_masks: list  # per-frame FovMask on the extended lattice
    feature_grids: list  # per-frame BevGrid of warped features
    labels: BevGrid  # (rows, cols, C_S + C_O + 1) on the target lattice
    visible_fov: np.ndarray  # bool, target lattice, True = some frame observes it
    occlusion: np.ndarray  # bool, target lattice, True = visible
    eval_mask: np.ndarray  # visible_fov & occlusion
    image_batches: list  # per-frame SampleBatch of subsampled pixels
    assemble: object  # callable: heatmap_fn | None -> SampleBatch over cells

    @property
    def training_sample(self) -> TrainingSample:
        return TrainingSample(self.image_batches, self.assemble)


def build_scene_sample(
    scene: Scene,
    config: ScenarioConfig,
    n_frames: int | None = None,
    interval: int | None = None,
    noise_std: float = 0.0,
    randomize_interval: bool = False,
    sequence_rng=None,
) -> SceneSample:
    """Render a frame window and derive every lattice the pipeline needs.

    The window is anchored at the middle of the ego trajectory so the same
    reference pose (hence identical labels and masks) serves any frame
    count or interval, keeping sweep rows comparable.
    """
    rig = config.rig()
    target = config.grid_spec()
    n = n_frames if n_frames is not None else config.effective_frames
    step = interval if interval is not None else config.interval
    ref = config.reference_index if config.reference_index is not None else (n - 1) // 2
    ref = min(ref, n - 1)
    anchor = len(scene.ego_timestamps) // 2

    frames = make_sequence(
        scene, rig, n, step,
        reference_index=ref,
        anchor=anchor,
        interval_range=config.interval_range if randomize_interval else None,
        rng=sequence_rng,
    )

    cam_poses = [frame.pose.compose(rig.mount) for frame in frames]
    extended = extend_for_frames(
        target, [(rig.camera, pose) for pose in cam_poses], max_range=config.extension_range
    )
    fovs = [fov_mask(rig.camera, pose, extended) for pose in cam_poses]
    warps = [
        frame_warp(rig, frame, noise_std, (config.seed, scene.seed, frame.index))
        for frame in frames
    ]

    features = []
    feature_grids = []
    for frame, warp in zip(frames, warps):
        feats = extract_features(frame.image, config.feature_count, config.feature_window)
        feature_grids.append(warp_to_bev(warp, feats, extended))
        features.append(feats.astype(np.float32))

    ref_world = reference_world_pose(scene, frames[ref])
    ref_time = frames[ref].timestamp
    labels = bev_labels(scene, ref_world, target, ref_time)
    occlusion = compute_occlusion_mask(
        config.lidar_spec(), scene_obstacles(scene, ref_world), target
    )
    # Losses and scores live where the window saw anything at all: the
    # union of the per-frame view masks.  A single frame reduces this to
    # the plain reference-frame mask.
    visible_fov = np.zeros((target.rows, target.cols), dtype=bool)
    for fov in fovs:
        visible_fov |= crop_mask_to_target(fov).data
    eval_mask = visible_fov & occlusion

    n_static = len(STATIC_CLASSES)
    label_warp = analytic_ground_homography(rig.camera, rig.mount)
    stride = config.pixel_subsample
    image_batches = []
    for k, frame in enumerate(frames):
        world_pose = ref_world.compose(frame.pose)
        pixel_labels = image_labels(
            bev_labels(scene, world_pose, target, frame.timestamp), label_warp, rig.camera
        )
        data = pixel_labels.data[::stride, ::stride]
        valid = pixel_labels.valid[::stride, ::stride]
        feats = features[k][::stride, ::stride]
        image_batches.append(
            SampleBatch(
                feats.reshape(-1, feats.shape[-1]).astype(float),
                data[..., :n_static].reshape(-1, n_static),
                data[..., n_static:].reshape(-1, data.shape[-1] - n_static),
                valid.reshape(-1),
                supervise_objects=(k == ref),
            )
        )

    static_flat = labels.data[..., :n_static].reshape(-1, n_static)
    object_flat = labels.data[..., n_static:].reshape(-1, labels.data.shape[-1] - n_static)
    eval_flat = eval_mask.reshape(-1)
    use_image = config.use_image

    def assemble(heatmap_fn):
        if heatmap_fn is not None and use_image:
            static_grids = []
            object_grid = None
            for k in range(n):
                static_hm, object_hm = heatmap_fn(np.asarray(features[k], dtype=float))
                static_grids.append(warp_to_bev(warps[k], static_hm, extended))
                if k == ref:
                    object_grid = warp_to_bev(warps[k], object_hm, extended)
            agg = assemble_features(object_grid, static_grids, feature_grids, fovs, ref)
        else:
            agg = assemble_features(
                None, [], feature_grids, fovs, ref, include_heatmaps=False
            )
        cells = crop_to_target(agg.grid).data
        return SampleBatch(
            cells.reshape(-1, cells.shape[-1]), static_flat, object_flat, eval_flat
        )

    return SceneSample(
        scene_seed=scene.seed,
        frames=frames,
        reference_index=ref,
        features=features,
        warps=warps,
        extended=extended,
        fov_masks=fovs,
        feature_grids=feature_grids,
        labels=labels,
        visible_fov=visible_fov,
        occlusion=occlusion,
        eval_mask=eval_mask,
        image_batches=image_batches,
        assemble=assemble,
    )


def build_model(config: ScenarioConfig) -> Model:
    """Fresh heads sized for the scenario's channel layout."""
    n_static = len(STATIC_CLASSES)
    n_objects = len(OBJECT_CLASSES)
    if config.use_bev:
        channels = 2 * config.feature_count
        if config.use_image:
            channels += n_static + n_objects + 1
    else:
        channels = None
    return new_model(
        config.feature_count, n_static, n_objects, channels,
        with_image_heads=config.use_image,
    )


def training_samples(config: ScenarioConfig, scenes=None) -> list:
    """Scene samples for the training split, with interval randomization."""
    scenes = generate_split(config, "train") if scenes is None else scenes
    samples = []
    for scene in scenes:
        samples.append(
            build_scene_sample(
                scene, config,
                randomize_interval=config.interval_range is not None,
                sequence_rng=np.random.default_rng([config.seed, scene.seed, 97]),
            )
        )
    return samples


def train_scenario(config: ScenarioConfig, scenes=None):
    """Build the training set, train fresh heads, return (model, history)."""
    config.validate()
    samples = training_samples(config, scenes)
    model = build_model(config)
    history = train(model, [s.training_sample for s in samples], config.train_config())
    return model, history


def predict_sample(model: Model, sample: SceneSample):
    """Class probabilities on the target lattice: (static, object) arrays.

    With grid heads the assembled channels are scored per cell.  Without
    them the pixel heatmaps are warped frame by frame and mean-combined
    (single-frame windows reduce to the reference warp alone).
    """
    rows, cols = sample.labels.spec.rows, sample.labels.spec.cols
    if model.has_bev_heads:
        heatmap_fn = model.image_heatmaps if model.has_image_heads else None
        batch = sample.assemble(heatmap_fn)
        static = model.bev_static.probabilities(batch.features)
        objects = model.bev_object.probabilities(batch.features)
        n_static = static.shape[-1]
        return static.reshape(rows, cols, n_static), objects.reshape(rows, cols, -1)
    if not model.has_image_heads:
        raise ValueError("model has neither pixel nor grid heads")
    static_grids, object_grids = [], []
    for feats, warp in zip(sample.features, sample.warps):
        static_hm, object_hm = model.image_heatmaps(np.asarray(feats, dtype=float))
        static_grids.append(warp_to_bev(warp, static_hm, sample.extended))
        object_grids.append(warp_to_bev(warp, object_hm, sample.extended))
    static = crop_to_target(aggregate(static_grids, sample.fov_masks, mode="mean")).data
    objects = crop_to_target(aggregate(object_grids, sample.fov_masks, mode="mean")).data
    return static, objects


def evaluate_sample(
    model: Model, sample: SceneSample, mask_kind: str = "occlusion"
) -> EvaluationReport:
    """Threshold predictions and score them under the chosen visibility mask."""
    if mask_kind == "occlusion":
        mask = sample.eval_mask
    elif mask_kind == "fov":
        mask = sample.visible_fov
    else:
        raise ValueError(f"unknown mask kind {mask_kind!r}")
    static_probs, object_probs = predict_sample(model, sample)
    static_bin, object_bin = threshold_predictions(static_probs, object_probs)
    n_static = len(STATIC_CLASSES)
    data = sample.labels.data
    return evaluate(static_bin, object_bin, data[..., :n_static], data[..., n_static:], mask)


def average_reports(reports) -> EvaluationReport:
    """Seed-average: per-class means, regrouped means, summed counts."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    names = list(reports[0].class_iou)
    class_iou = {
        name: float(np.mean([r.class_iou[name] for r in reports])) for name in names
    }
    statics = [class_iou[c] for c in STATIC_CLASSES if c in class_iou]
    mean_static = float(np.mean(statics)) if statics else 0.0
    mean_overall = float(np.mean(list(class_iou.values())))
    confusion = np.sum([r.confusion for r in reports], axis=0)
    cells = int(sum(r.cell_count for r in reports))
    return EvaluationReport(class_iou, mean_static, mean_overall, confusion, cells)


def evaluate_scenario(
    config: ScenarioConfig,
    model: Model,
    n_frames: int | None = None,
    interval: int | None = None,
    noise_std: float = 0.0,
    mask_kind: str = "occlusion",
    scenes=None,
):
    """Score the model over the evaluation split; returns (summary, reports)."""
    scenes = generate_split(config, "eval") if scenes is None else scenes
    reports = []
    for scene in scenes:
        sample = build_scene_sample(
            scene, config, n_frames=n_frames, interval=interval, noise_std=noise_std
        )
        reports.append(evaluate_sample(model, sample, mask_kind))
    return average_reports(reports), reports


# -- image-label pixmap packing ----------------------------------------

_VALID_BIT = 1 << 6
_OBJECT_SHIFT = 4


def pack_image_labels(labels: ImageLabels) -> np.ndarray:
    """Losslessly encode per-pixel labels in one byte each.

    Bits 0..3 hold the static class flags, bits 4..5 the object class
    index (background = 0) and bit 6 the validity flag; invalid pixels
    encode as 0.
    """
    n_static = len(STATIC_CLASSES)
    statics = labels.data[..., :n_static].astype(np.uint8)
    weights = (1 << np.arange(n_static)).astype(np.uint8)
    packed = (statics * weights).sum(axis=-1).astype(np.uint8)
    packed |= np.argmax(labels.data[..., n_static:], axis=-1).astype(np.uint8) << _OBJECT_SHIFT
    packed |= np.uint8(_VALID_BIT) * labels.valid.astype(np.uint8)
    return np.where(labels.valid, packed, np.uint8(0))


def unpack_image_labels(packed: np.ndarray) -> ImageLabels:
    """Inverse of :func:`pack_image_labels`."""
    packed = np.asarray(packed)
    if packed.ndim == 3 and packed.shape[-1] == 1:
        packed = packed[..., 0]
    packed = packed.astype(np.uint16)
    valid = (packed & _VALID_BIT) > 0
    n_static = len(STATIC_CLASSES)
    n_objects = len(OBJECT_CLASSES)
    statics = (packed[..., None] >> np.arange(n_static)) & 1
    object_idx = (packed >> _OBJECT_SHIFT) & 0b11
    objects = np.eye(n_objects + 1)[object_idx]
    data = np.concatenate([statics.astype(float), objects], axis=-1)
    data *= valid[..., None]
    return ImageLabels(data, valid)
