"""Procedural scenes, virtual LiDAR/camera simulation and ground truth.

Scenes are textured rectangles with exact ray intersections, so every
simulated measurement has an analytic ground truth: LiDAR ranges, camera
colors, depth maps and interframe pixel correspondences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from .calib import CameraFrame, CorrespondenceSet
from .geom_fit import LidarFrame
from .geometry import DTYPE, Intrinsics, make_pose, pixel_grid, pixel_rays_batch, pose_inverse


class SceneError(ValueError):
    pass


# ---------------------------------------------------------------------------
# textures
# ---------------------------------------------------------------------------


class Texture:
    def eval(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass
class CheckerTexture(Texture):
    tiles: int = 8
    color_a: tuple = (0.9, 0.9, 0.9)
    color_b: tuple = (0.1, 0.1, 0.1)

    def eval(self, a, b):
        ia = np.floor((a + 1.0) / 2.0 * self.tiles).astype(int)
        ib = np.floor((b + 1.0) / 2.0 * self.tiles).astype(int)
        even = (ia + ib) % 2 == 0
        out = np.where(even[:, None], self.color_a, self.color_b)
        return out.astype(np.float64)


@dataclass
class GradientTexture(Texture):
    color_a: tuple = (0.1, 0.2, 0.8)
    color_b: tuple = (0.9, 0.8, 0.1)

    def eval(self, a, b):
        s = ((a + 1.0) / 2.0)[:, None]
        return (1 - s) * np.asarray(self.color_a) + s * np.asarray(self.color_b)


class FourierTexture(Texture):
    """Smooth seeded noise: a sum of random plane waves per channel.

    Smoothness matters: photometric and reprojection gradients need image
    intensity to vary continuously at splat scale.
    """

    def __init__(self, seed: int, waves: int = 14, contrast: float = 0.45, max_freq: float = 6.0):
        rng = np.random.default_rng(seed)
        self.freq = rng.uniform(0.5, max_freq, (3, waves, 2))
        self.phase = rng.uniform(0, 2 * math.pi, (3, waves))
        amp = rng.uniform(0.3, 1.0, (3, waves))
        self.amp = amp / amp.sum(axis=1, keepdims=True) * contrast

    def eval(self, a, b):
        ab = np.stack([a, b], axis=-1)  # (M, 2)
        arg = np.einsum("mk,cwk->mcw", ab, self.freq * math.pi) + self.phase[None]
        vals = 0.5 + (self.amp[None] * np.sin(arg)).sum(axis=2)
        return np.clip(vals, 0.0, 1.0)


# ---------------------------------------------------------------------------
# scene
# ---------------------------------------------------------------------------


@dataclass
class Surface:
    """Textured rectangle: center, orthonormal in-plane axes, half extents."""

    center: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    half_u: float
    half_v: float
    texture: Texture

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.axis_u = np.asarray(self.axis_u, dtype=np.float64)
        self.axis_v = np.asarray(self.axis_v, dtype=np.float64)
        self.axis_u /= np.linalg.norm(self.axis_u)
        self.axis_v -= self.axis_u * (self.axis_v @ self.axis_u)
        norm = np.linalg.norm(self.axis_v)
        if norm < 1e-12 or self.half_u <= 0 or self.half_v <= 0:
            raise SceneError("degenerate surface")
        self.axis_v /= norm
        self.normal = np.cross(self.axis_u, self.axis_v)


@dataclass
class Scene:
    surfaces: list[Surface]

    def raycast(self, origins: np.ndarray, dirs: np.ndarray):
        """Closest-hit query.

        Returns (t, surface index, (a, b) in [-1, 1]); misses have t = inf
        and index -1.
        """
        n = origins.shape[0]
        best_t = np.full(n, np.inf)
        best_idx = np.full(n, -1, dtype=np.int64)
        best_ab = np.zeros((n, 2))
        for si, s in enumerate(self.surfaces):
            dn = dirs @ s.normal
            ok = np.abs(dn) > 1e-12
            t = np.where(ok, ((s.center - origins) @ s.normal) / np.where(ok, dn, 1.0), np.inf)
            ok &= t > 1e-9
            hit = origins + dirs * np.where(ok, t, 0.0)[:, None]
            rel = hit - s.center
            a = rel @ s.axis_u / s.half_u
            b = rel @ s.axis_v / s.half_v
            ok &= (np.abs(a) <= 1.0) & (np.abs(b) <= 1.0) & (t < best_t)
            best_t[ok] = t[ok]
            best_idx[ok] = si
            best_ab[ok, 0] = a[ok]
            best_ab[ok, 1] = b[ok]
        return best_t, best_idx, best_ab

    def colors(self, idx: np.ndarray, ab: np.ndarray) -> np.ndarray:
        out = np.zeros((len(idx), 3))
        for si, s in enumerate(self.surfaces):
            m = idx == si
            if m.any():
                out[m] = s.texture.eval(ab[m, 0], ab[m, 1])
        return out

    def normals(self, idx: np.ndarray) -> np.ndarray:
        out = np.zeros((len(idx), 3))
        for si, s in enumerate(self.surfaces):
            m = idx == si
            if m.any():
                out[m] = s.normal
        return out


def make_scene(spec: dict, seed: int = 0) -> Scene:
    """Build a preset scene with seeded textures.

    Presets: ``corridor`` (floor, two walls, end wall, three oblique
    panels) and ``plane`` (a single fronto-parallel plane, the translation
    degeneracy demonstrator).
    """
    preset = spec.get("preset", "corridor")
    max_freq = float(spec.get("texture_freq", 6.0))
    tex = lambda i: FourierTexture(seed * 1000 + i, max_freq=max_freq)
    if preset == "corridor":
        length = float(spec.get("length", 12.0))
        half_w = float(spec.get("half_width", 2.0))
        floor_y = float(spec.get("floor_y", 1.3))
        ceil_y = floor_y - float(spec.get("height", 2.6))
        zc = (length - 2.0) / 2.0
        hz = (length + 2.0) / 2.0
        surfaces = [
            # floor (normal up)
            Surface([0, floor_y, zc], [1, 0, 0], [0, 0, 1], half_w, hz, tex(0)),
            # side walls
            Surface([-half_w, (floor_y + ceil_y) / 2, zc], [0, 0, 1], [0, 1, 0],
                    hz, (floor_y - ceil_y) / 2, tex(1)),
            Surface([half_w, (floor_y + ceil_y) / 2, zc], [0, 0, 1], [0, 1, 0],
                    hz, (floor_y - ceil_y) / 2, tex(2)),
            # end wall
            Surface([0, (floor_y + ceil_y) / 2, length], [1, 0, 0], [0, 1, 0],
                    half_w, (floor_y - ceil_y) / 2, tex(3)),
            # three oblique panels with varied normals
            Surface([-1.0, 0.2, 4.0], [0.8, 0, 0.6], [0, 1, 0], 0.7, 0.6, tex(4)),
            Surface([1.1, -0.1, 6.0], [0.7, 0.2, -0.7], [0, 1, 0.2], 0.6, 0.55, tex(5)),
            Surface([0.1, 0.55, 8.0], [1, 0, 0.35], [0, 0.9, -0.45], 0.8, 0.5, tex(6)),
        ]
        return Scene(surfaces)
    if preset == "plane":
        z = float(spec.get("z", 6.0))
        half = float(spec.get("half", 6.0))
        return Scene([Surface([0, 0, z], [1, 0, 0], [0, 1, 0], half, half, tex(0))])
    raise SceneError(f"unknown scene preset {preset!r}")


# ---------------------------------------------------------------------------
# sensors
# ---------------------------------------------------------------------------


@dataclass
class LidarPattern:
    n_azimuth: int = 48
    n_elevation: int = 24
    azimuth_deg: float = 60.0
    elevation_deg: float = 25.0

    def directions(self) -> np.ndarray:
        az = np.radians(np.linspace(-self.azimuth_deg, self.azimuth_deg, self.n_azimuth))
        el = np.radians(np.linspace(-self.elevation_deg, self.elevation_deg, self.n_elevation))
        azg, elg = np.meshgrid(az, el, indexing="ij")
        # y points down; positive elevation tips the ray downward
        d = np.stack(
            [np.sin(azg) * np.cos(elg), np.sin(elg), np.cos(azg) * np.cos(elg)], axis=-1
        )
        return d.reshape(-1, 3)


def scan_lidar(
    scene: Scene,
    pose: torch.Tensor,
    pattern: LidarPattern,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> LidarFrame:
    """Simulate one scan; pose is world-to-sensor.  Misses are dropped."""
    inv = pose_inverse(pose).numpy()
    d_sensor = pattern.directions()
    d_world = d_sensor @ inv[:3, :3].T
    origin = inv[:3, 3]
    t, idx, _ = scene.raycast(np.broadcast_to(origin, d_world.shape), d_world)
    hit = np.isfinite(t)
    if not hit.any():
        raise SceneError("LiDAR scan hit nothing")
    ranges = t[hit]
    if noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        ranges = ranges + rng.normal(0.0, noise_sigma, len(ranges))
    points_sensor = d_sensor[hit] * ranges[:, None]
    normals = scene.normals(idx[hit])
    # orient toward the sensor
    flip = (normals * d_world[hit]).sum(axis=1) > 0
    normals[flip] *= -1
    return LidarFrame(
        points=torch.tensor(points_sensor, dtype=DTYPE),
        pose=pose.clone(),
        normals=torch.tensor(normals, dtype=DTYPE),
    )


def render_gt_camera(
    scene: Scene, cam_pose: torch.Tensor, intr: Intrinsics
) -> tuple[CameraFrame, torch.Tensor, torch.Tensor]:
    """Exact ray-cast image; returns (frame, z-depth map, hit mask)."""
    grid = pixel_grid(intr).reshape(-1, 2)
    origins, dirs, cos = pixel_rays_batch(intr, cam_pose, grid)
    t, idx, ab = scene.raycast(origins.numpy(), dirs.numpy())
    colors = scene.colors(idx, ab)
    hit = np.isfinite(t)
    colors[~hit] = 0.0
    depth = np.where(hit, t * cos.numpy(), 0.0)
    h, w = intr.height, intr.width
    frame = CameraFrame(image=torch.tensor(colors.reshape(h, w, 3), dtype=DTYPE))
    return frame, torch.tensor(depth.reshape(h, w), dtype=DTYPE), torch.tensor(
        hit.reshape(h, w)
    )


def gt_correspondences(
    scene: Scene,
    pose_a: torch.Tensor,
    pose_b: torch.Tensor,
    intr: Intrinsics,
    count: int,
    rng: np.random.Generator,
    margin: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Occlusion-checked exact pixel matches between two camera views."""
    picked_a, picked_b = [], []
    attempts = 0
    inv_b = pose_inverse(pose_b).numpy()
    origin_b = inv_b[:3, 3]
    while len(picked_a) < count and attempts < 50:
        attempts += 1
        n = max((count - len(picked_a)) * 3, 16)
        px = np.stack(
            [
                rng.uniform(margin, intr.width - 1 - margin, n),
                rng.uniform(margin, intr.height - 1 - margin, n),
            ],
            axis=1,
        )
        origins, dirs, _ = pixel_rays_batch(intr, pose_a, torch.tensor(px, dtype=DTYPE))
        t, idx, _ = scene.raycast(origins.numpy(), dirs.numpy())
        hit = np.isfinite(t)
        pts = origins.numpy() + dirs.numpy() * np.where(hit, t, 0.0)[:, None]
        pb = pose_b.numpy()
        cam_b = pts @ pb[:3, :3].T + pb[:3, 3]
        z_b = cam_b[:, 2]
        ok = hit & (z_b > 1e-6)
        qx = intr.fx * cam_b[:, 0] / np.where(ok, z_b, 1.0) + intr.cx
        qy = intr.fy * cam_b[:, 1] / np.where(ok, z_b, 1.0) + intr.cy
        ok &= (qx >= margin) & (qx <= intr.width - 1 - margin)
        ok &= (qy >= margin) & (qy <= intr.height - 1 - margin)
        # occlusion check from camera b
        delta = pts - origin_b
        dist = np.linalg.norm(delta, axis=1)
        d_b = delta / np.where(dist > 1e-12, dist, 1.0)[:, None]
        t_b, _, _ = scene.raycast(np.broadcast_to(origin_b, d_b.shape), d_b)
        ok &= t_b >= dist - 1e-6
        for i in np.nonzero(ok)[0]:
            if len(picked_a) >= count:
                break
            picked_a.append(px[i])
            picked_b.append([qx[i], qy[i]])
    return np.asarray(picked_a).reshape(-1, 2), np.asarray(picked_b).reshape(-1, 2)


# ---------------------------------------------------------------------------
# rig trajectory
# ---------------------------------------------------------------------------


@dataclass
class RigTrajectory:
    lidar_poses: list[torch.Tensor]  # world -> lidar
    extrinsic_gt: torch.Tensor  # lidar -> camera (4x4)
    intrinsics: Intrinsics

    def camera_pose(self, i: int) -> torch.Tensor:
        return self.extrinsic_gt @ self.lidar_poses[i]


def make_trajectory(
    n_frames: int,
    extrinsic_gt: torch.Tensor,
    intr: Intrinsics,
    step: float = 0.15,
    yaw_amplitude_deg: float = 3.0,
    start: tuple[float, float, float] = (0.0, 0.0, 0.0),
    sway: float = 0.03,
) -> RigTrajectory:
    """Forward motion with mild yaw oscillation (driving-style trajectory).

    Set ``yaw_amplitude_deg=0`` and ``sway=0`` for pure forward motion (the
    translation-degeneracy demonstrator).
    """
    poses = []
    for i in range(n_frames):
        yaw = math.radians(yaw_amplitude_deg) * math.sin(0.7 * i)
        c, s = math.cos(yaw), math.sin(yaw)
        rot = torch.tensor([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]], dtype=DTYPE)
        pos = torch.tensor(
            [start[0] + sway * math.sin(0.5 * i), start[1], start[2] + step * i], dtype=DTYPE
        )
        # world -> lidar: x_l = R^T (x_w - p)
        poses.append(make_pose(rot.T, -rot.T @ pos))
    return RigTrajectory(poses, extrinsic_gt.clone(), intr)


def build_correspondence_set(
    scene: Scene,
    traj: RigTrajectory,
    per_pair: int,
    rng: np.random.Generator,
) -> CorrespondenceSet:
    fa, fb, ua, ub = [], [], [], []
    for n in range(len(traj.lidar_poses) - 1):
        qa, qb = gt_correspondences(
            scene, traj.camera_pose(n), traj.camera_pose(n + 1), traj.intrinsics, per_pair, rng
        )
        fa.append(np.full(len(qa), n))
        fb.append(np.full(len(qa), n + 1))
        ua.append(qa)
        ub.append(qb)
    return CorrespondenceSet(
        np.concatenate(fa).astype(np.int64),
        np.concatenate(fb).astype(np.int64),
        np.concatenate(ua),
        np.concatenate(ub),
    )
