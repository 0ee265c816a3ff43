"""SE(3)/se(3) algebra, pinhole camera model and pose error metrics.

Conventions used throughout the package:

* A sensor pose is a 4x4 matrix that maps world coordinates into that
  sensor's frame.  The camera pose of frame i is ``T_e @ lidar_pose_i``
  where ``T_e`` is the LiDAR-to-camera extrinsic.
* se(3) parameters are ordered ``(rho, phi)``: translation part first,
  rotation vector last.
* Camera frame: x right, y down, z forward (depth).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

log = logging.getLogger(__name__)

DTYPE = torch.float64

# Below this rotation angle the closed-form exp/log coefficients switch to
# their series expansions to avoid catastrophic cancellation.
SMALL_ANGLE = 1e-8


class GeometryError(ValueError):
    pass


def so3_hat(phi: torch.Tensor) -> torch.Tensor:
    """Skew-symmetric matrix of a 3-vector."""
    zero = torch.zeros((), dtype=phi.dtype)
    return torch.stack(
        [
            torch.stack([zero, -phi[2], phi[1]]),
            torch.stack([phi[2], zero, -phi[0]]),
            torch.stack([-phi[1], phi[0], zero]),
        ]
    )


def so3_exp(phi: torch.Tensor) -> torch.Tensor:
    """Rodrigues rotation from a rotation vector (differentiable)."""
    theta = torch.linalg.norm(phi)
    # Safe angle keeps both where-branches NaN-free in backward.
    safe = torch.clamp(theta, min=SMALL_ANGLE)
    a = torch.where(theta < SMALL_ANGLE, 1.0 - theta**2 / 6.0, torch.sin(safe) / safe)
    b = torch.where(theta < SMALL_ANGLE, 0.5 - theta**2 / 24.0, (1.0 - torch.cos(safe)) / safe**2)
    k = so3_hat(phi)
    eye = torch.eye(3, dtype=phi.dtype)
    return eye + a * k + b * (k @ k)


def so3_log(rot: torch.Tensor) -> torch.Tensor:
    """Rotation vector of a rotation matrix; handles the angle-pi branch."""
    cos_theta = torch.clamp((rot.diagonal().sum() - 1.0) / 2.0, -1.0, 1.0)
    theta = torch.acos(cos_theta)
    vee = torch.stack([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]) / 2.0
    if theta < SMALL_ANGLE:
        return vee
    if float(torch.pi - theta) < 1e-6:
        # Near pi the antisymmetric part vanishes; recover the axis from the
        # symmetric part (R + I)/2 = a a^T + O(pi - theta).
        sym = (rot + torch.eye(3, dtype=rot.dtype)) / 2.0
        col = int(torch.argmax(sym.diagonal()))
        axis = sym[:, col] / torch.linalg.norm(sym[:, col])
        # Disambiguate the sign with the (possibly tiny) antisymmetric part.
        if float(axis @ vee) < 0.0:
            axis = -axis
        log.debug("so3_log: symmetric branch fired (theta=%.9f)", float(theta))
        return theta * axis
    return theta / torch.sin(theta) * vee


def se3_exp(xi: torch.Tensor) -> torch.Tensor:
    """Exponential map: 6-vector (rho, phi) -> 4x4 rigid transform."""
    if not torch.is_tensor(xi):
        xi = torch.tensor(xi, dtype=DTYPE)
    elif xi.dtype != DTYPE:
        xi = xi.to(DTYPE)
    rho, phi = xi[:3], xi[3:]
    theta = torch.linalg.norm(phi)
    safe = torch.clamp(theta, min=SMALL_ANGLE)
    small = theta < SMALL_ANGLE
    b = torch.where(small, 0.5 - theta**2 / 24.0, (1.0 - torch.cos(safe)) / safe**2)
    c = torch.where(small, 1.0 / 6.0 - theta**2 / 120.0, (safe - torch.sin(safe)) / safe**3)
    k = so3_hat(phi)
    eye = torch.eye(3, dtype=xi.dtype)
    rot = so3_exp(phi)
    v = eye + b * k + c * (k @ k)
    out = torch.cat(
        [
            torch.cat([rot, (v @ rho).reshape(3, 1)], dim=1),
            torch.tensor([[0.0, 0.0, 0.0, 1.0]], dtype=xi.dtype),
        ],
        dim=0,
    )
    return out


def se3_log(pose: torch.Tensor) -> torch.Tensor:
    """Logarithm map: 4x4 rigid transform -> 6-vector (rho, phi)."""
    phi = so3_log(pose[:3, :3])
    theta = torch.linalg.norm(phi)
    k = so3_hat(phi)
    eye = torch.eye(3, dtype=pose.dtype)
    if theta < SMALL_ANGLE:
        c = 1.0 / 12.0 + theta**2 / 720.0
    else:
        # (1 - (theta/2) cot(theta/2)) / theta^2, stable on (0, pi].
        half = theta / 2.0
        c = (1.0 - half * torch.cos(half) / torch.sin(half)) / theta**2
    v_inv = eye - 0.5 * k + c * (k @ k)
    rho = v_inv @ pose[:3, 3]
    return torch.cat([rho, phi])


def make_pose(rot: torch.Tensor, trans: torch.Tensor) -> torch.Tensor:
    out = torch.eye(4, dtype=rot.dtype)
    out[:3, :3] = rot
    out[:3, 3] = trans
    return out


def pose_inverse(pose: torch.Tensor) -> torch.Tensor:
    rot = pose[:3, :3]
    return make_pose(rot.T, -rot.T @ pose[:3, 3])


def check_pose(pose: torch.Tensor, tol: float = 1e-9) -> torch.Tensor:
    """Validate an SE(3) matrix: orthonormal rotation, det +1, affine row."""
    pose = torch.as_tensor(pose, dtype=DTYPE)
    if pose.shape != (4, 4):
        raise GeometryError(f"pose must be 4x4, got {tuple(pose.shape)}")
    rot = pose[:3, :3]
    if float(torch.abs(rot.T @ rot - torch.eye(3, dtype=pose.dtype)).max()) > tol:
        raise GeometryError("rotation is not orthonormal")
    if abs(float(torch.linalg.det(rot)) - 1.0) > tol:
        raise GeometryError("rotation determinant is not +1")
    return pose


def reorthonormalize(rot: torch.Tensor) -> torch.Tensor:
    """Project a near-rotation onto SO(3) via polar decomposition."""
    u, _, vt = torch.linalg.svd(rot)
    det = torch.linalg.det(u @ vt)
    d = torch.diag(torch.tensor([1.0, 1.0, float(torch.sign(det))], dtype=rot.dtype))
    return u @ d @ vt


def renormalize_pose(pose: torch.Tensor, drift_tol: float = 1e-9) -> torch.Tensor:
    """Re-orthonormalize the rotation block if Frobenius drift exceeds tol."""
    rot = pose[:3, :3]
    drift = torch.linalg.norm(rot.T @ rot - torch.eye(3, dtype=pose.dtype))
    if float(drift) <= drift_tol:
        return pose
    return make_pose(reorthonormalize(rot), pose[:3, 3])


def apply_bias(xi_true: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Biased extrinsic: componentwise addition in se(3) parameter space."""
    xi_true = torch.as_tensor(xi_true, dtype=DTYPE)
    bias = torch.as_tensor(bias, dtype=DTYPE)
    return se3_exp(xi_true + bias)


def pose_error(est: torch.Tensor, gt: torch.Tensor) -> tuple[float, float]:
    """(rotation error in degrees, translation error in meters)."""
    rot_vec = so3_log(est[:3, :3] @ gt[:3, :3].T)
    rot_deg = float(torch.rad2deg(torch.linalg.norm(rot_vec)))
    trans_m = float(torch.linalg.norm(est[:3, 3] - gt[:3, 3]))
    return rot_deg, trans_m


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @property
    def matrix(self) -> torch.Tensor:
        return torch.tensor(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=DTYPE,
        )

    def contains(self, pixel: torch.Tensor) -> bool:
        x, y = float(pixel[0]), float(pixel[1])
        return 0.0 <= x <= self.width - 1 and 0.0 <= y <= self.height - 1


@dataclass(frozen=True)
class Ray:
    """World-space ray with unit direction."""

    origin: torch.Tensor
    direction: torch.Tensor


def camera_center(cam_pose: torch.Tensor) -> torch.Tensor:
    """World position of the camera given a world-to-camera pose."""
    rot = cam_pose[:3, :3]
    return -rot.T @ cam_pose[:3, 3]


def pixel_ray(intr: Intrinsics, cam_pose: torch.Tensor, pixel: torch.Tensor) -> Ray:
    """World-space ray through a (subpixel) image coordinate."""
    pixel = torch.as_tensor(pixel, dtype=DTYPE)
    if not intr.contains(pixel):
        raise GeometryError(f"pixel {pixel.tolist()} outside {intr.width}x{intr.height} image")
    d_cam = torch.stack(
        [
            (pixel[0] - intr.cx) / intr.fx,
            (pixel[1] - intr.cy) / intr.fy,
            torch.ones((), dtype=DTYPE),
        ]
    )
    d_world = cam_pose[:3, :3].T @ d_cam
    return Ray(camera_center(cam_pose), d_world / torch.linalg.norm(d_world))


def project_point(
    intr: Intrinsics, cam_pose: torch.Tensor, p_world: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Project a world point; returns ((x, y), z-depth). Caller culls z <= 0."""
    p_world = torch.as_tensor(p_world, dtype=cam_pose.dtype)
    p_cam = cam_pose[:3, :3] @ p_world + cam_pose[:3, 3]
    z = p_cam[2]
    if float(torch.abs(z)) < 1e-12:
        raise GeometryError("point lies on the camera plane: singular projection")
    pixel = torch.stack([intr.fx * p_cam[0] / z + intr.cx, intr.fy * p_cam[1] / z + intr.cy])
    return pixel, z


def pixel_grid(intr: Intrinsics, stride: int = 1) -> torch.Tensor:
    """(H', W', 2) grid of pixel-center coordinates at the given stride."""
    ys = torch.arange(0, intr.height, stride, dtype=DTYPE)
    xs = torch.arange(0, intr.width, stride, dtype=DTYPE)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def pixel_rays_batch(
    intr: Intrinsics, cam_pose: torch.Tensor, pixels: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batched back-projection.

    Returns (origins (B,3), unit world directions (B,3), cos factors (B,))
    where ``cos`` converts distance along the unit ray into camera z-depth:
    ``z = t * cos``.  Differentiable w.r.t. ``cam_pose``.
    """
    pixels = pixels.reshape(-1, 2).to(cam_pose.dtype)
    ones = torch.ones(pixels.shape[0], 1, dtype=cam_pose.dtype)
    d_cam = torch.cat(
        [(pixels[:, :1] - intr.cx) / intr.fx, (pixels[:, 1:2] - intr.cy) / intr.fy, ones], dim=1
    )
    norms = torch.linalg.norm(d_cam, dim=1, keepdim=True)
    d_unit_cam = d_cam / norms
    rot = cam_pose[:3, :3]
    origin = -rot.T @ cam_pose[:3, 3]
    dirs = d_unit_cam @ rot  # row-vector convention: R^T d
    origins = origin.expand_as(dirs)
    cos = 1.0 / norms.squeeze(1)
    return origins, dirs, cos
