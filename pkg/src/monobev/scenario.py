"""Scenario configuration: one document wiring every pipeline stage.

A scenario bundles the scene generator parameters, camera rig, frame
sampling, grid layout, simulated-LIDAR geometry, feature/model sizes and
the training schedule, plus the three component toggles (image branch,
grid branch, temporal aggregation) that the component study flips.
Configs round-trip through YAML so a dataset directory records exactly
how it was produced.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

from .grid import GridSpec
from .model import TrainConfig
from .occlusion import LidarSpec, default_elevations
from .world import CameraRig, SceneParams, default_rig

#: Component rows of the ablation study, in presentation order.  Each row
#: maps a label to the (use_image, use_bev, use_temporal) toggle triple;
#: the missing two combinations (neither branch, temporal alone) cannot
#: produce predictions and are rejected by validation.
COMPONENT_ROWS = (
    ("Img", (True, False, False)),
    ("BEV", (False, True, False)),
    ("Img+Temp", (True, False, True)),
    ("Img+BEV", (True, True, False)),
    ("BEV+Temp", (False, True, True)),
    ("Img+BEV+Temp", (True, True, True)),
)

#: Sweep axes for the ablation command.
ABLATION_AXES = {
    "frames": (1, 2, 3, 4, 5),
    "interval": (1, 2, 3),
    "noise": (0.0, 0.5, 1.0, 1.25, 2.5),
    "components": tuple(label for label, _ in COMPONENT_ROWS),
}


@dataclass
class ScenarioConfig:
    """Everything needed to generate, train on and evaluate one scenario."""

    seed: int = 0
    train_scenes: int = 6
    eval_scenes: int = 10
    scene: SceneParams = field(default_factory=SceneParams)

    # Camera rig.
    image_width: int = 512
    image_height: int = 256
    focal: float = 256.0
    camera_height: float = 1.6
    camera_pitch_deg: float = 10.0

    # Frame sampling.  ``reference_index=None`` centres the reference in
    # the window (frames both before and after it); an explicit index
    # allows e.g. the causal variant with the reference last.
    frames: int = 4
    interval: int = 3
    reference_index: int | None = None
    interval_range: tuple | None = (1, 3)  # training-time randomization

    # Output grid.
    resolution: float = 0.25
    lateral_extent: tuple = (-16.0, 16.0)
    longitudinal_extent: tuple = (1.0, 33.0)
    extension_range: float = 35.0  # ground reach used to grow the working grid

    # Simulated LIDAR for occlusion masking.
    lidar_beams: int = 64
    lidar_azimuths: int = 1024
    lidar_range: float = 70.0
    lidar_height: float = 1.8

    # Features and training.
    feature_count: int = 8
    feature_window: int = 5
    pixel_subsample: int = 4
    epochs: int = 100
    lr: float = 1.0
    gamma: float = 2.0
    alpha_floor: float = 0.01
    site_weights: tuple = (1.0, 1.0, 1.0)

    # Component toggles.
    use_image: bool = True
    use_bev: bool = True
    use_temporal: bool = True

    def validate(self) -> None:
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if self.reference_index is not None and not (
            0 <= self.reference_index < self.frames
        ):
            raise ValueError("reference_index outside the frame window")
        if self.interval_range is not None:
            lo, hi = self.interval_range
            if not (1 <= lo <= hi):
                raise ValueError("interval_range must satisfy 1 <= lo <= hi")
        if not (self.use_image or self.use_bev):
            raise ValueError(
                "at least one prediction branch (image or grid) must be enabled"
            )
        if self.train_scenes < 1 or self.eval_scenes < 1:
            raise ValueError("need at least one scene per split")
        if self.pixel_subsample < 1:
            raise ValueError("pixel_subsample must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        self.scene.validate()
        self.grid_spec()  # raises InvalidExtentError on bad extents
        self.rig()

    # -- derived pieces ------------------------------------------------

    @property
    def effective_frames(self) -> int:
        """Window length after the temporal toggle (off forces one frame)."""
        return self.frames if self.use_temporal else 1

    @property
    def component_label(self) -> str:
        for label, combo in COMPONENT_ROWS:
            if combo == (self.use_image, self.use_bev, self.use_temporal):
                return label
        raise ValueError("toggle combination outside the component study")

    def grid_spec(self) -> GridSpec:
        return GridSpec.from_extents(
            self.resolution, tuple(self.lateral_extent), tuple(self.longitudinal_extent)
        )

    def rig(self) -> CameraRig:
        return default_rig(
            image_width=self.image_width,
            image_height=self.image_height,
            focal=self.focal,
            height=self.camera_height,
            pitch_deg=self.camera_pitch_deg,
        )

    def lidar_spec(self) -> LidarSpec:
        return LidarSpec(
            origin=(0.0, 0.0, self.lidar_height),
            azimuth_count=self.lidar_azimuths,
            elevation_angles=default_elevations(self.lidar_beams),
            max_range=self.lidar_range,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            lr=self.lr,
            gamma=self.gamma,
            alpha_floor=self.alpha_floor,
            site_weights=tuple(self.site_weights),
        )


def with_components(config: ScenarioConfig, label: str) -> ScenarioConfig:
    """Copy of ``config`` with the toggles of the named component row."""
    for row_label, (img, bev, temp) in COMPONENT_ROWS:
        if row_label == label:
            return replace(config, use_image=img, use_bev=bev, use_temporal=temp)
    raise ValueError(f"unknown component row {label!r}")


def config_to_dict(config: ScenarioConfig) -> dict:
    doc = asdict(config)
    doc["scene"] = asdict(config.scene)
    return doc


def _tuplify(value):
    return tuple(value) if isinstance(value, list) else value


def config_from_dict(doc: dict) -> ScenarioConfig:
    doc = dict(doc)
    scene_doc = doc.pop("scene", None) or {}
    scene = SceneParams(**{k: _tuplify(v) for k, v in scene_doc.items()})
    known = {f for f in ScenarioConfig.__dataclass_fields__ if f != "scene"}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
    config = ScenarioConfig(scene=scene, **{k: _tuplify(v) for k, v in doc.items()})
    config.validate()
    return config
