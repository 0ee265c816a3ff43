"""Tests for the procedural scene simulator and its exact ground truth."""

import numpy as np
import pytest
import torch

from splatcalib.calib import reproject_pixel, relative_pose, triangulate_depth
from splatcalib.geometry import DTYPE, Intrinsics, pixel_rays_batch, se3_exp
from splatcalib.synth import (
    CheckerTexture,
    LidarPattern,
    Scene,
    SceneError,
    Surface,
    build_correspondence_set,
    gt_correspondences,
    make_scene,
    make_trajectory,
    render_gt_camera,
    scan_lidar,
)

INTR = Intrinsics(fx=40.0, fy=40.0, cx=32.0, cy=24.0, width=64, height=48)


def surface_distance(scene: Scene, pts: np.ndarray) -> np.ndarray:
    """Distance from each point to the nearest scene surface rectangle."""
    best = np.full(len(pts), np.inf)
    for s in scene.surfaces:
        rel = pts - s.center
        a = np.clip(rel @ s.axis_u, -s.half_u, s.half_u)
        b = np.clip(rel @ s.axis_v, -s.half_v, s.half_v)
        closest = s.center + a[:, None] * s.axis_u + b[:, None] * s.axis_v
        best = np.minimum(best, np.linalg.norm(pts - closest, axis=1))
    return best


class TestSceneConstruction:
    def test_corridor_preset_surface_count(self):
        scene = make_scene({"preset": "corridor"}, seed=1)
        # floor + two side walls + end wall + three oblique panels
        assert len(scene.surfaces) == 7

    def test_plane_preset_single_fronto_parallel(self):
        scene = make_scene({"preset": "plane"}, seed=1)
        assert len(scene.surfaces) == 1
        normal = scene.surfaces[0].normal
        assert abs(abs(normal[2]) - 1.0) < 1e-12

    def test_same_seed_identical_textures(self):
        a = make_scene({"preset": "corridor"}, seed=3)
        b = make_scene({"preset": "corridor"}, seed=3)
        ab = np.linspace(-1, 1, 50)
        for sa, sb in zip(a.surfaces, b.surfaces):
            assert np.array_equal(sa.texture.eval(ab, ab), sb.texture.eval(ab, ab))

    def test_degenerate_surface_rejected(self):
        with pytest.raises(SceneError):
            Surface([0, 0, 0], [1, 0, 0], [2, 0, 0], 1.0, 1.0, CheckerTexture())
        with pytest.raises(SceneError):
            Surface([0, 0, 0], [1, 0, 0], [0, 1, 0], 0.0, 1.0, CheckerTexture())

    def test_unknown_preset_rejected(self):
        with pytest.raises(SceneError):
            make_scene({"preset": "nope"})


class TestLidarScan:
    def test_plane_axis_ray_exact_range(self):
        scene = Scene([Surface([0, 0, 5.0], [1, 0, 0], [0, 1, 0], 6.0, 6.0, CheckerTexture())])
        pattern = LidarPattern(n_azimuth=1, n_elevation=1, azimuth_deg=0.0, elevation_deg=0.0)
        frame = scan_lidar(scene, torch.eye(4, dtype=DTYPE), pattern)
        # a single central ray along +z
        assert frame.points.shape[0] == 1
        assert abs(float(torch.linalg.norm(frame.points[0])) - 5.0) < 1e-9

    def test_noiseless_points_lie_on_surfaces(self):
        scene = make_scene({"preset": "corridor"}, seed=1)
        pose = torch.eye(4, dtype=DTYPE)
        frame = scan_lidar(scene, pose, LidarPattern())
        pts_world = frame.points.numpy()  # identity pose: sensor frame == world
        assert surface_distance(scene, pts_world).max() < 1e-9

    def test_occluder_blocks_background(self):
        near = Surface([0, 0, 2.0], [1, 0, 0], [0, 1, 0], 0.5, 0.5, CheckerTexture())
        far = Surface([0, 0, 6.0], [1, 0, 0], [0, 1, 0], 8.0, 8.0, CheckerTexture())
        scene = Scene([near, far])
        frame = scan_lidar(scene, torch.eye(4, dtype=DTYPE), LidarPattern(n_azimuth=64, n_elevation=32))
        pts = frame.points.numpy()
        # rays through the near square must stop at z=2, never reach z=6
        through = (np.abs(pts[:, 0]) < 0.49) & (np.abs(pts[:, 1]) < 0.49)
        assert through.any()
        assert np.allclose(pts[through, 2], 2.0, atol=1e-9)

    def test_range_noise_applied(self):
        scene = make_scene({"preset": "plane"}, seed=1)
        clean = scan_lidar(scene, torch.eye(4, dtype=DTYPE), LidarPattern())
        noisy = scan_lidar(
            scene,
            torch.eye(4, dtype=DTYPE),
            LidarPattern(),
            noise_sigma=0.05,
            rng=np.random.default_rng(0),
        )
        delta = torch.linalg.norm(noisy.points, dim=1) - torch.linalg.norm(clean.points, dim=1)
        assert 0.01 < float(delta.abs().mean()) < 0.2

    def test_empty_scan_rejected(self):
        scene = make_scene({"preset": "plane"}, seed=1)
        # face away from the plane: nothing to hit
        flip = torch.eye(4, dtype=DTYPE)
        flip[0, 0] = flip[2, 2] = -1.0
        with pytest.raises(SceneError):
            scan_lidar(scene, flip, LidarPattern(n_azimuth=1, n_elevation=1))


class TestCameraRender:
    def test_principal_pixel_checker_color(self):
        tex = CheckerTexture(tiles=2)
        scene = Scene([Surface([0, 0, 4.0], [1, 0, 0], [0, 1, 0], 2.0, 2.0, tex)])
        frame, depth, hit = render_gt_camera(scene, torch.eye(4, dtype=DTYPE), INTR)
        cy, cx = int(INTR.cy), int(INTR.cx)
        # principal ray hits (a, b) = (0, 0): second tile in both axes -> color_a
        expected = tex.eval(np.array([0.0]), np.array([0.0]))[0]
        assert np.allclose(frame.image[cy, cx].numpy(), expected)
        assert abs(float(depth[cy, cx]) - 4.0) < 1e-9
        assert bool(hit[cy, cx])

    def test_correspondences_reproject_exactly(self):
        scene = make_scene({"preset": "corridor"}, seed=1)
        traj = make_trajectory(3, se3_exp(torch.zeros(6, dtype=DTYPE)), INTR)
        pose_a, pose_b = traj.camera_pose(0), traj.camera_pose(1)
        q_a, q_b = gt_correspondences(scene, pose_a, pose_b, INTR, 50, np.random.default_rng(0))
        assert len(q_a) == 50
        origins, dirs, cos = pixel_rays_batch(INTR, pose_a, torch.tensor(q_a, dtype=DTYPE))
        t, _, _ = scene.raycast(origins.numpy(), dirs.numpy())
        zbar = torch.tensor(t, dtype=DTYPE) * cos
        rel = relative_pose(pose_a, pose_b)
        warped, z_w = reproject_pixel(rel, INTR, torch.tensor(q_a, dtype=DTYPE), zbar)
        assert float((warped - torch.tensor(q_b, dtype=DTYPE)).abs().max()) < 1e-9
        assert float(z_w.min()) > 0

    def test_correspondences_triangulate_to_gt_depth(self):
        scene = make_scene({"preset": "corridor"}, seed=1)
        traj = make_trajectory(3, se3_exp(torch.zeros(6, dtype=DTYPE)), INTR)
        pose_a, pose_b = traj.camera_pose(0), traj.camera_pose(1)
        q_a, q_b = gt_correspondences(scene, pose_a, pose_b, INTR, 50, np.random.default_rng(1))
        origins, dirs, cos = pixel_rays_batch(INTR, pose_a, torch.tensor(q_a, dtype=DTYPE))
        t, _, _ = scene.raycast(origins.numpy(), dirs.numpy())
        z_gt = torch.tensor(t, dtype=DTYPE) * cos
        rel = relative_pose(pose_a, pose_b)
        z_x, valid_x, z_y, valid_y = triangulate_depth(
            rel, INTR, torch.tensor(q_a, dtype=DTYPE), torch.tensor(q_b, dtype=DTYPE)
        )
        assert float((z_x[valid_x] - z_gt[valid_x]).abs().max()) < 1e-9
        if bool(valid_y.any()):
            assert float((z_y[valid_y] - z_gt[valid_y]).abs().max()) < 1e-9


class TestTrajectory:
    def test_rig_rigidity(self):
        gt_xi = torch.tensor([0.05, -0.06, 0.10, 0.02, -0.03, 0.04], dtype=DTYPE)
        traj = make_trajectory(5, se3_exp(gt_xi), INTR)
        for i in range(5):
            expected = traj.extrinsic_gt @ traj.lidar_poses[i]
            assert float((traj.camera_pose(i) - expected).abs().max()) == 0.0

    def test_pure_forward_option(self):
        traj = make_trajectory(
            4, torch.eye(4, dtype=DTYPE), INTR, yaw_amplitude_deg=0.0, sway=0.0
        )
        for i, pose in enumerate(traj.lidar_poses):
            assert float((pose[:3, :3] - torch.eye(3, dtype=DTYPE)).abs().max()) == 0.0
            assert float(pose[0, 3]) == 0.0  # no lateral motion

    def test_correspondence_set_links_consecutive(self):
        scene = make_scene({"preset": "corridor"}, seed=1)
        traj = make_trajectory(4, torch.eye(4, dtype=DTYPE), INTR)
        corr = build_correspondence_set(scene, traj, 10, np.random.default_rng(0))
        assert np.array_equal(corr.frame_b, corr.frame_a + 1)
        assert set(corr.frame_a) == {0, 1, 2}
