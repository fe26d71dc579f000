"""Tests for procedural scene generation, rendering and labelling."""

import math

import numpy as np
import pytest

from monobev.camera import (
    PinholeCamera,
    Pose,
    analytic_ground_homography,
    project_image_to_ground,
)
from monobev.errors import GenerationError, TrajectoryTooShortError
from monobev.grid import GridSpec, world_to_cell
from monobev.occlusion import Obstacle
from monobev.world import (
    LABEL_CHANNELS,
    OBJECT_CLASSES,
    OBJECT_DIMENSIONS,
    PALETTE,
    STATIC_CLASSES,
    CameraRig,
    DynamicObject,
    Scene,
    SceneParams,
    bev_labels,
    build_texture,
    camera_mount,
    default_rig,
    generate_scene,
    heading_pose,
    image_labels,
    make_sequence,
    occluders_in_frame,
    points_in_polygons,
    render_frame,
    scene_from_dict,
    scene_to_dict,
)


# ---------------------------------------------------------------------------
# A tiny hand-built scene with exactly known geometry, used wherever the
# test needs to predict pixel colours or cell labels without any oracle
# fancier than arithmetic.


def _square_scene(objects=(), occluders=(), noise=0.0):
    params = SceneParams(noise_amplitude=noise)
    layers = {
        "drivable": [np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]])],
        "crossing": [np.array([[0.0, 4.0], [10.0, 4.0], [10.0, 6.0], [0.0, 6.0]])],
        "walkway": [np.array([[-2.0, 0.0], [0.0, 0.0], [0.0, 10.0], [-2.0, 10.0]])],
        "carpark": [],
    }
    times = np.arange(5) * params.timestep
    return Scene(
        layers=layers,
        texture=build_texture(layers, seed=0, params=params),
        objects=list(objects),
        occluders=list(occluders),
        ego_timestamps=times,
        ego_poses=[Pose.identity() for _ in times],
        seed=0,
        params=params,
    )


def _static_object(class_name, x, y, heading=0.0):
    width, length, height = OBJECT_DIMENSIONS[class_name]
    waypoints = np.array([[0.0, x, y, heading], [10.0, x, y, heading]])
    return DynamicObject(class_name, width, length, height, waypoints)


def _pixel_for_point(camera, cam_pose, point):
    """Project a 3-D world point through a camera pose by hand."""
    local = cam_pose.rotation.T @ (np.asarray(point, dtype=float) - cam_pose.translation)
    assert local[2] > 0
    u = camera.cx + camera.fx * local[0] / local[2]
    v = camera.cy - camera.fy * local[1] / local[2]
    return int(round(u)), int(round(v))


def test_heading_pose_axes():
    pose = heading_pose(2.0, 3.0, 0.0)
    np.testing.assert_allclose(pose.rotation, np.eye(3), atol=1e-15)
    # Heading of +90 degrees turns the forward axis to world +x.
    pose = heading_pose(0.0, 0.0, math.pi / 2.0)
    np.testing.assert_allclose(pose.transform([0.0, 1.0, 0.0]), [1.0, 0.0, 0.0], atol=1e-12)
    # The right-hand axis then points along world -y.
    np.testing.assert_allclose(pose.transform([1.0, 0.0, 0.0]), [0.0, -1.0, 0.0], atol=1e-12)


def test_camera_mount_optical_axis():
    level = camera_mount(height=1.4, pitch_deg=0.0)
    np.testing.assert_allclose(level.rotation[:, 2], [0.0, 1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(level.translation, [0.0, 0.0, 1.4])
    nadir_like = camera_mount(height=2.0, pitch_deg=90.0)
    np.testing.assert_allclose(nadir_like.rotation[:, 2], [0.0, 0.0, -1.0], atol=1e-12)


class TestGeneration:
    def test_deterministic(self):
        a = generate_scene(11)
        b = generate_scene(11)
        assert scene_to_dict(a) == scene_to_dict(b)
        assert np.array_equal(a.texture.rgb, b.texture.rgb)

    def test_seeds_differ(self):
        assert scene_to_dict(generate_scene(1)) != scene_to_dict(generate_scene(2))

    def test_layers_present(self):
        scene = generate_scene(5)
        assert len(scene.layers["drivable"]) == 1
        assert len(scene.layers["crossing"]) >= 1
        assert len(scene.layers["walkway"]) == 2
        assert len(scene.objects) >= 1
        assert len(scene.occluders) >= 1

    def test_crossings_inside_road(self):
        for seed in range(6):
            scene = generate_scene(seed)
            road = scene.layers["drivable"]
            for quad in scene.layers["crossing"]:
                # Corners plus a grid of interior points of each quad.
                uu, vv = np.meshgrid(np.linspace(0, 1, 7), np.linspace(0, 1, 7))
                u = uu.reshape(-1, 1)
                v = vv.reshape(-1, 1)
                pts = (
                    (1 - u) * (1 - v) * quad[0]
                    + u * (1 - v) * quad[1]
                    + u * v * quad[2]
                    + (1 - u) * v * quad[3]
                )
                assert points_in_polygons(pts, road).all()

    def test_objects_ride_the_road(self):
        """Footprint samples of every actor stay on the drivable corridor."""
        total = 0
        inside = 0
        for seed in range(6):
            scene = generate_scene(seed)
            road = scene.layers["drivable"]
            for obj in scene.objects:
                for t in scene.ego_timestamps[::2]:
                    quad = obj.footprint_at(float(t))
                    uu, vv = np.meshgrid(np.linspace(0, 1, 5), np.linspace(0, 1, 5))
                    u = uu.reshape(-1, 1)
                    v = vv.reshape(-1, 1)
                    pts = (
                        (1 - u) * (1 - v) * quad[0]
                        + u * (1 - v) * quad[1]
                        + u * v * quad[2]
                        + (1 - u) * v * quad[3]
                    )
                    hits = points_in_polygons(pts, road)
                    total += hits.size
                    inside += int(hits.sum())
        assert total > 0
        assert inside / total >= 0.95

    def test_objects_clear_of_ego(self):
        for seed in range(4):
            scene = generate_scene(seed)
            ego_xy = np.array([p.translation[:2] for p in scene.ego_poses])
            for obj in scene.objects:
                for i, t in enumerate(scene.ego_timestamps):
                    pos, _ = obj.state_at(float(t))
                    assert np.linalg.norm(pos - ego_xy[i]) >= 2.0

    def test_bad_params_rejected(self):
        with pytest.raises(GenerationError):
            generate_scene(0, SceneParams(road_width_range=(3.0, 3.5)))
        with pytest.raises(GenerationError):
            generate_scene(0, SceneParams(timestep=0.0))
        with pytest.raises(GenerationError):
            generate_scene(0, SceneParams(margin=5.0))

    def test_texture_colors_identify_layers(self):
        scene = generate_scene(9)
        ground_names = ("offroad", "drivable", "walkway", "carpark", "crossing")
        palette = np.array([PALETTE[n] for n in ground_names])
        # A point deep inside the first crossing.
        quad = scene.layers["crossing"][0]
        probe = quad.mean(axis=0)
        color = scene.texture.sample(probe[None, :])[0]
        distances = np.linalg.norm(palette - color, axis=1)
        assert ground_names[int(np.argmin(distances))] == "crossing"


class TestRoundTrip:
    def test_scene_document_round_trip(self):
        scene = generate_scene(21)
        rebuilt = scene_from_dict(scene_to_dict(scene))
        assert np.array_equal(scene.texture.rgb, rebuilt.texture.rgb)
        assert len(rebuilt.objects) == len(scene.objects)
        for a, b in zip(scene.objects, rebuilt.objects):
            assert a.class_name == b.class_name
            np.testing.assert_array_equal(a.waypoints, b.waypoints)
        for a, b in zip(scene.ego_poses, rebuilt.ego_poses):
            np.testing.assert_allclose(a.rotation, b.rotation, atol=1e-12)
            np.testing.assert_allclose(a.translation, b.translation, atol=1e-12)
        for name in scene.layers:
            for pa, pb in zip(scene.layers[name], rebuilt.layers[name]):
                np.testing.assert_array_equal(pa, np.asarray(pb))

    def test_texture_rebuild_is_exact(self):
        scene = generate_scene(3)
        again = build_texture(scene.layers, scene.seed, scene.params)
        assert np.array_equal(scene.texture.rgb, again.rgb)


class TestRendering:
    def test_nadir_ground_colors(self):
        scene = _square_scene()
        camera = PinholeCamera(100.0, 100.0, 100.0, 100.0, 200, 200)
        # Straight-down view centred over the square, high enough to see
        # past its edges.
        nadir = Pose(
            np.column_stack([[1, 0, 0], [0, -1, 0], [0, 0, -1]]).astype(float),
            [5.0, 5.0, 12.0],
        )
        image = render_frame(scene, camera, nadir, 0.0)
        assert image.shape == (200, 200, 3)
        np.testing.assert_allclose(image[100, 100], PALETTE["crossing"], atol=1e-12)
        # 12 m up with f=100: one metre on the ground is 100/12 px, and with
        # this mounting ground x grows with pixel u along the centre row.
        px_per_m = 100.0 / 12.0
        row_y5 = 100  # world y = 5 stays on the image centre row
        u_at = lambda x: int(round(100 + (x - 5.0) * px_per_m))
        np.testing.assert_allclose(image[row_y5, u_at(-1.0)], PALETTE["walkway"], atol=1e-12)
        np.testing.assert_allclose(image[row_y5, u_at(-4.0)], PALETTE["offroad"], atol=1e-12)

    def test_forward_view_object_and_sky(self):
        car = _static_object("car", 0.0, 8.0)
        scene = _square_scene(objects=[car])
        rig = default_rig(image_width=256, image_height=128, focal=128.0)
        cam_pose = Pose.identity().compose(rig.mount)
        image = render_frame(scene, rig.camera, cam_pose, 0.0)
        # Top row looks above the horizon.
        np.testing.assert_allclose(image[0, 50], PALETTE["sky"], atol=1e-12)
        # A ray at the centre of the car's front face must stop at the car.
        u, v = _pixel_for_point(rig.camera, cam_pose, [0.0, 5.75, 0.7])
        np.testing.assert_allclose(image[v, u], PALETTE["car"], atol=1e-12)
        # Without the car the same pixel sees the ground.
        empty = render_frame(_square_scene(), rig.camera, cam_pose, 0.0)
        assert not np.allclose(empty[v, u], PALETTE["car"], atol=0.2)

    def test_nearest_entity_wins(self):
        near = _static_object("car", 0.0, 6.0)
        far = _static_object("truck", 0.0, 12.0)
        scene = _square_scene(objects=[far, near])
        rig = default_rig(image_width=256, image_height=128, focal=128.0)
        cam_pose = rig.mount
        image = render_frame(scene, rig.camera, cam_pose, 0.0)
        u, v = _pixel_for_point(rig.camera, cam_pose, [0.0, 3.75, 0.7])
        np.testing.assert_allclose(image[v, u], PALETTE["car"], atol=1e-12)

    def test_occluder_rendered(self):
        scene = _square_scene(
            occluders=[
                Obstacle(np.array([[-1.0, 6.0], [1.0, 6.0], [1.0, 8.0], [-1.0, 8.0]]), 3.0)
            ]
        )
        rig = default_rig(image_width=256, image_height=128, focal=128.0)
        image = render_frame(scene, rig.camera, rig.mount, 0.0)
        u, v = _pixel_for_point(rig.camera, rig.mount, [0.0, 6.0, 1.5])
        np.testing.assert_allclose(image[v, u], PALETTE["occluder"], atol=1e-12)

    def test_moving_object_moves(self):
        width, length, height = OBJECT_DIMENSIONS["car"]
        waypoints = np.array([[0.0, 0.0, 8.0, 0.0], [2.0, 4.0, 8.0, 0.0]])
        car = DynamicObject("car", width, length, height, waypoints)
        scene = _square_scene(objects=[car])
        rig = default_rig(image_width=128, image_height=64, focal=64.0)
        early = render_frame(scene, rig.camera, rig.mount, 0.0)
        late = render_frame(scene, rig.camera, rig.mount, 2.0)
        assert not np.array_equal(early, late)


class TestLabels:
    def test_square_scene_labels(self):
        ped = _static_object("pedestrian", 5.0, 5.0)
        car = _static_object("car", 5.0, 5.0)
        scene = _square_scene(objects=[car, ped])
        spec = GridSpec.from_extents(0.5, (-4.0, 8.0), (0.5, 9.5))
        grid = bev_labels(scene, Pose.identity(), spec, 0.0)
        assert grid.data.shape == (spec.rows, spec.cols, len(LABEL_CHANNELS))
        one_hot = grid.data[..., len(STATIC_CLASSES):]
        np.testing.assert_array_equal(one_hot.sum(axis=-1), 1.0)

        def labels_at(x, y):
            r, c = world_to_cell(spec, (x, y))
            return {name: grid.data[r, c, i] for i, name in enumerate(LABEL_CHANNELS)}

        at = labels_at(5.25, 5.25)  # inside crossing, car and pedestrian
        assert at["drivable"] == 1 and at["crossing"] == 1 and at["walkway"] == 0
        # The pedestrian's smaller footprint wins the overlap.
        assert at["pedestrian"] == 1 and at["car"] == 0

        at = labels_at(3.25, 5.25)  # crossing cell beside the car
        assert at["crossing"] == 1 and at["background"] == 1

        at = labels_at(-1.25, 5.25)
        assert at["walkway"] == 1 and at["drivable"] == 0

        at = labels_at(5.25, 1.25)  # road south of the crossing and car
        assert at["drivable"] == 1 and at["crossing"] == 0 and at["background"] == 1

        at = labels_at(-3.75, 1.25)  # off everything
        assert all(at[name] == 0 for name in STATIC_CLASSES) and at["background"] == 1

    def test_generated_scene_label_invariants(self):
        scene = generate_scene(4)
        spec = GridSpec.from_extents(0.5, (-16.0, 16.0), (1.0, 33.0))
        pose = scene.ego_poses[len(scene.ego_poses) // 2]
        t = float(scene.ego_timestamps[len(scene.ego_poses) // 2])
        grid = bev_labels(scene, pose, spec, t)
        data = grid.data
        assert set(np.unique(data)) <= {0.0, 1.0}
        crossing = data[..., STATIC_CLASSES.index("crossing")]
        drivable = data[..., STATIC_CLASSES.index("drivable")]
        assert np.all(drivable[crossing == 1] == 1)
        np.testing.assert_array_equal(data[..., len(STATIC_CLASSES):].sum(axis=-1), 1.0)

    def test_label_frame_follows_ego(self):
        """The same world cell lands in different grid cells as the ego moves."""
        scene = _square_scene()
        spec = GridSpec.from_extents(0.5, (-4.0, 4.0), (0.5, 8.5))
        ahead = bev_labels(scene, heading_pose(5.0, 0.0, 0.0), spec, 0.0)
        shifted = bev_labels(scene, heading_pose(5.0, 2.0, 0.0), spec, 0.0)
        # Crossing occupies world y in [4, 6]: two metres closer after the shift.
        row_of = lambda g, y: int(np.argmax(g.data[..., 1].sum(axis=1) > 0))
        assert row_of(shifted, 0) == row_of(ahead, 0) - 4  # 2 m / 0.5 m cells


class TestImageLabels:
    def test_matches_per_pixel_projection(self):
        scene = _square_scene(objects=[_static_object("car", 0.0, 6.0)])
        rig = default_rig(image_width=128, image_height=64, focal=64.0)
        spec = GridSpec.from_extents(0.25, (-6.0, 6.0), (0.5, 12.0))
        grid = bev_labels(scene, Pose.identity(), spec, 0.0)
        warp = analytic_ground_homography(rig.camera, rig.mount)
        result = image_labels(grid, warp, rig.camera)
        assert result.data.shape == (64, 128, grid.spec.channels)

        rng = np.random.default_rng(0)
        checked_valid = 0
        for _ in range(300):
            ui = int(rng.integers(0, 128))
            vi = int(rng.integers(0, 64))
            ground = project_image_to_ground(rig.camera, rig.mount, (float(ui), float(vi)))
            if ground is None:
                assert not result.valid[vi, ui]
                continue
            cell = world_to_cell(spec, (ground[0], ground[1]))
            if cell is None:
                assert not result.valid[vi, ui]
                continue
            checked_valid += 1
            assert result.valid[vi, ui]
            np.testing.assert_array_equal(result.data[vi, ui], grid.data[cell])
        assert checked_valid > 50

    def test_horizon_rows_invalid(self):
        scene = _square_scene()
        rig = default_rig(image_width=128, image_height=64, focal=64.0)
        spec = GridSpec.from_extents(0.25, (-6.0, 6.0), (0.5, 12.0))
        grid = bev_labels(scene, Pose.identity(), spec, 0.0)
        warp = analytic_ground_homography(rig.camera, rig.mount)
        result = image_labels(grid, warp, rig.camera)
        # Horizon sits at v = cy - fy * tan(pitch); everything above is sky.
        horizon = 32.0 - 64.0 * math.tan(math.radians(10.0))
        assert not result.valid[: int(horizon) - 1].any()
        assert result.valid[int(horizon) + 3 :].any()


class TestSequences:
    def test_sequence_poses_and_reference(self):
        scene = generate_scene(2)
        rig = default_rig(image_width=96, image_height=48, focal=48.0)
        frames = make_sequence(scene, rig, n_frames=4, interval=2)
        assert len(frames) == 4
        ref = frames[-1]
        assert ref.index == 3
        assert np.array_equal(ref.pose.rotation, np.eye(3))
        assert np.array_equal(ref.pose.translation, np.zeros(3))
        step = scene.params.ego_speed * scene.params.timestep * 2
        for k, frame in enumerate(frames[:-1]):
            behind = (3 - k) * step
            assert frame.pose.translation[1] < 0
            assert abs(-frame.pose.translation[1] - behind) < 0.35 * behind + 1e-6
            assert frame.image.shape == (48, 96, 3)
        times = [f.timestamp for f in frames]
        np.testing.assert_allclose(np.diff(times), 2 * scene.params.timestep)

    def test_sequence_oracle_pose(self):
        scene = generate_scene(6)
        rig = default_rig(image_width=64, image_height=32, focal=32.0)
        frames = make_sequence(scene, rig, n_frames=2, interval=3, anchor=20)
        ref_world = scene.ego_poses[20]
        other_world = scene.ego_poses[17]
        expected = ref_world.inverse().compose(other_world)
        np.testing.assert_allclose(frames[0].pose.rotation, expected.rotation, atol=1e-12)
        np.testing.assert_allclose(frames[0].pose.translation, expected.translation, atol=1e-12)

    def test_too_short_trajectory(self):
        scene = generate_scene(2)
        rig = default_rig(image_width=64, image_height=32, focal=32.0)
        with pytest.raises(TrajectoryTooShortError):
            make_sequence(scene, rig, n_frames=30, interval=3)
        with pytest.raises(TrajectoryTooShortError):
            make_sequence(scene, rig, n_frames=2, interval=1, anchor=0)

    def test_interval_randomisation(self):
        scene = generate_scene(2)
        rig = default_rig(image_width=64, image_height=32, focal=32.0)
        seen = set()
        for trial in range(6):
            rng = np.random.default_rng(trial)
            frames = make_sequence(
                scene, rig, n_frames=2, interval=1, interval_range=(1, 3), rng=rng
            )
            dt = frames[1].timestamp - frames[0].timestamp
            steps = round(dt / scene.params.timestep)
            assert 1 <= steps <= 3
            seen.add(steps)
        assert len(seen) > 1

    def test_reference_index_override(self):
        scene = generate_scene(2)
        rig = default_rig(image_width=64, image_height=32, focal=32.0)
        frames = make_sequence(scene, rig, n_frames=3, interval=2, reference_index=0, anchor=5)
        assert np.array_equal(frames[0].pose.rotation, np.eye(3))
        # Later frames are ahead of the reference.
        assert frames[2].pose.translation[1] > 0


def test_occluders_in_frame_oracle():
    scene = _square_scene(
        occluders=[
            Obstacle(np.array([[4.0, 4.0], [6.0, 4.0], [6.0, 6.0], [4.0, 6.0]]), 2.0)
        ]
    )
    ego = heading_pose(5.0, 0.0, math.pi / 2.0)
    local = occluders_in_frame(scene, ego)
    assert len(local) == 1
    # The ego faces world +x, with its right axis along world -y, so a world
    # offset (dx, dy) lands at local (-dy, dx).
    expected = []
    for wx, wy in scene.occluders[0].vertices:
        dx, dy = wx - 5.0, wy - 0.0
        expected.append([-dy, dx])
    got = {tuple(np.round(v, 9)) for v in local[0].vertices}
    want = {tuple(np.round(v, 9)) for v in np.array(expected)}
    assert got == want
