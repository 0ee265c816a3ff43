"""Joint optimization of splat colors and the LiDAR-camera extrinsic.

The extrinsic is a 6-vector (rho, phi); every camera pose is derived as
``se3_exp(xi) @ lidar_pose`` so all losses backpropagate into the same
parameters.  Losses: uncertainty-weighted photometric, depth-warp
reprojection with occlusion masking, and two-view triangulation under a
Tukey kernel.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from .geometry import DTYPE, Intrinsics, se3_exp
from .render import MIN_COVERAGE, composite_rays, render_view
from .geometry import pixel_rays_batch
from .splats import SplatField

log = logging.getLogger(__name__)

DEGENERATE_COS = 1e-6


@dataclass
class CameraFrame:
    """One camera image with the index of its paired LiDAR pose."""

    image: torch.Tensor  # (H, W, 3) in [0, 1]
    lidar_index: int = 0

    def check_size(self, intr: Intrinsics) -> None:
        h, w = self.image.shape[:2]
        if (w, h) != (intr.width, intr.height):
            raise ValueError(f"image {w}x{h} does not match intrinsics {intr.width}x{intr.height}")


@dataclass
class CorrespondenceSet:
    """Matched pixels between consecutive frames, column arrays."""

    frame_a: np.ndarray  # (M,) int
    frame_b: np.ndarray  # (M,) int
    uv_a: np.ndarray  # (M, 2) float
    uv_b: np.ndarray  # (M, 2) float

    def __post_init__(self):
        if not np.all(self.frame_b == self.frame_a + 1):
            raise ValueError("correspondences must link consecutive frames")

    def __len__(self) -> int:
        return len(self.frame_a)

    def for_pair(self, n: int) -> tuple[torch.Tensor, torch.Tensor]:
        sel = self.frame_a == n
        return (
            torch.tensor(self.uv_a[sel], dtype=DTYPE),
            torch.tensor(self.uv_b[sel], dtype=DTYPE),
        )

    @classmethod
    def empty(cls) -> "CorrespondenceSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), np.zeros((0, 2)), np.zeros((0, 2)))


@dataclass
class CalibConfig:
    lambda_t: float = 1.0
    lambda_r: float = 200.0
    tukey_c: float = 1.0
    theta2: float = 0.05  # occlusion depth agreement (m)
    iters: int = 15000
    lr_rot_initial: float = 1e-2
    lr_trans_initial: float = 5e-4
    lr_rot_second: float = 1e-3
    lr_trans_second: float = 1e-2
    lr_color: float = 2.5e-3
    color_warmup: int = 0  # iterations of photometric-only color fitting before pose moves
    rot_converged_deg: float = 0.1
    trans_halve_thresholds: tuple[float, ...] = (1e-5, 5e-6)
    schedule_window: int = 500
    stride_schedule: tuple[int, ...] = (8, 4, 2, 1)
    batch_pixels: int = 16384
    frames_per_iter: int = 4
    corr_per_pair: int = 256
    mask_refresh: int = 100
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-15
    use_uncertainty_weights: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ["lambda_t", "lambda_r", "tukey_c", "theta2"]:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class ExtrinsicEstimate:
    """se(3)-parameterized LiDAR-to-camera transform."""

    xi: torch.Tensor  # (6,) rho then phi

    def pose(self) -> torch.Tensor:
        return se3_exp(self.xi)


def relative_pose(pose_a: torch.Tensor, pose_b: torch.Tensor) -> torch.Tensor:
    """Transform from frame-a camera space to frame-b camera space."""
    rot = pose_b[:3, :3] @ pose_a[:3, :3].T
    trans = pose_b[:3, 3] - rot @ pose_a[:3, 3]
    bottom = torch.tensor([[0.0, 0.0, 0.0, 1.0]], dtype=pose_a.dtype)
    return torch.cat([torch.cat([rot, trans.reshape(3, 1)], dim=1), bottom], dim=0)


def bilinear_sample(image: torch.Tensor, pts: torch.Tensor) -> torch.Tensor:
    """Differentiable bilinear lookup; pts (B,2) in pixel coords, clamped."""
    h, w = image.shape[:2]
    x = torch.clamp(pts[:, 0], 0.0, w - 1.0)
    y = torch.clamp(pts[:, 1], 0.0, h - 1.0)
    x0 = torch.clamp(x.detach().floor(), max=w - 2.0)
    y0 = torch.clamp(y.detach().floor(), max=h - 2.0)
    fx = x - x0
    fy = y - y0
    x0l = x0.long()
    y0l = y0.long()
    flat = image.reshape(h * w, -1)
    i00 = flat[y0l * w + x0l]
    i01 = flat[y0l * w + x0l + 1]
    i10 = flat[(y0l + 1) * w + x0l]
    i11 = flat[(y0l + 1) * w + x0l + 1]
    fx = fx.unsqueeze(1)
    fy = fy.unsqueeze(1)
    return (
        i00 * (1 - fx) * (1 - fy) + i01 * fx * (1 - fy) + i10 * (1 - fx) * fy + i11 * fx * fy
    ).squeeze(-1)


# ---------------------------------------------------------------------------
# photometric loss
# ---------------------------------------------------------------------------


def photometric_loss(
    field: SplatField,
    image: torch.Tensor,
    cam_pose: torch.Tensor,
    intr: Intrinsics,
    pixels: torch.Tensor,
    use_weights: bool = True,
) -> tuple[torch.Tensor, dict]:
    """Uncertainty-weighted L2 between rendered and measured pixel colors.

    Returns (loss, info).  info['flagged'] is True when every sampled ray
    lacks surface coverage, in which case the loss is zero and should be
    skipped for the step.
    """
    origins, dirs, _ = pixel_rays_batch(intr, cam_pose, pixels)
    bundle = composite_rays(field, origins, dirs)
    covered = bundle.weight_sum.detach() >= MIN_COVERAGE
    if int(covered.sum()) == 0:
        zero = torch.zeros((), dtype=origins.dtype)
        return zero, {"flagged": True, "covered": 0}
    xi = pixels.long()
    target = image[xi[:, 1], xi[:, 0]]
    sq = ((bundle.color - target) ** 2).sum(dim=1)
    if use_weights:
        w = torch.exp(-bundle.error)
    else:
        w = torch.ones_like(sq)
    loss = (w * sq).sum() / w.sum()
    return loss, {"flagged": False, "covered": int(covered.sum())}


# ---------------------------------------------------------------------------
# reprojection loss
# ---------------------------------------------------------------------------


def reproject_pixel(
    rel_pose: torch.Tensor, intr: Intrinsics, pixels: torch.Tensor, zbar: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Warp pixels from frame n into frame n+1 using rendered depth.

    Returns (warped pixels (B,2), reprojected depth (B,)); callers must
    exclude entries with non-positive depth.
    """
    ones = torch.ones(pixels.shape[0], 1, dtype=pixels.dtype)
    d = torch.cat(
        [(pixels[:, :1] - intr.cx) / intr.fx, (pixels[:, 1:2] - intr.cy) / intr.fy, ones], dim=1
    )
    p = d * zbar.unsqueeze(1)
    q = p @ rel_pose[:3, :3].T + rel_pose[:3, 3]
    z_w = q[:, 2]
    safe = torch.where(torch.abs(z_w) > 1e-12, z_w, torch.full_like(z_w, 1e-12))
    warped = torch.stack(
        [intr.fx * q[:, 0] / safe + intr.cx, intr.fy * q[:, 1] / safe + intr.cy], dim=1
    )
    return warped, z_w


def occlusion_mask(
    warped: torch.Tensor,
    z_w: torch.Tensor,
    target_depth: torch.Tensor,
    target_weight: torch.Tensor,
    intr: Intrinsics,
    theta2: float,
    stride: int = 1,
) -> torch.Tensor:
    """True where the warp lands in-bounds on a surface at agreeing depth.

    ``target_depth``/``target_weight`` are maps rendered from the
    destination view at the given stride.
    """
    pts = warped.detach() / stride
    inb = (
        (warped[:, 0] >= 0)
        & (warped[:, 0] <= intr.width - 1)
        & (warped[:, 1] >= 0)
        & (warped[:, 1] <= intr.height - 1)
        & (z_w.detach() > 0)
    )
    zt = bilinear_sample(target_depth.unsqueeze(-1), pts)
    wt = bilinear_sample(target_weight.unsqueeze(-1), pts)
    agree = (torch.abs(z_w.detach() - zt) <= theta2) & (wt >= MIN_COVERAGE)
    return inb & agree


def reprojection_loss(
    field: SplatField,
    image_a: torch.Tensor,
    image_b: torch.Tensor,
    pose_a: torch.Tensor,
    pose_b: torch.Tensor,
    intr: Intrinsics,
    stride: int,
    theta2: float,
    target_maps: dict[str, torch.Tensor] | None = None,
) -> tuple[torch.Tensor, dict]:
    """Color consistency between strided pixels and their depth-based warp.

    Gradients reach the extrinsic through the rendered source depth and the
    relative pose; the bilinear color lookup is differentiable in the warp.
    """
    from .geometry import pixel_grid

    grid = pixel_grid(intr, stride).reshape(-1, 2)
    origins, dirs, cos = pixel_rays_batch(intr, pose_a, grid)
    bundle = composite_rays(field, origins, dirs)
    zbar = bundle.depth * cos
    src_cov = bundle.weight_sum.detach() >= MIN_COVERAGE

    rel = relative_pose(pose_a, pose_b)
    warped, z_w = reproject_pixel(rel, intr, grid, zbar)
    if target_maps is None:
        with torch.no_grad():
            target_maps = render_view(field, intr, pose_b, stride=stride)
    mask = (
        occlusion_mask(warped, z_w, target_maps["depth"], target_maps["weight"], intr, theta2, stride)
        & src_cov
    )
    if int(mask.sum()) == 0:
        log.warning("reprojection loss: all pixels masked")
        return torch.zeros((), dtype=grid.dtype), {"used": 0, "total": len(grid)}
    color_w = bilinear_sample(image_b, warped[mask])
    color_v = bilinear_sample(image_a, grid[mask])
    loss = ((color_w - color_v) ** 2).sum(dim=1).mean()
    return loss, {"used": int(mask.sum()), "total": len(grid)}


# ---------------------------------------------------------------------------
# triangulation loss
# ---------------------------------------------------------------------------


def triangulate_depth(
    rel_pose: torch.Tensor, intr: Intrinsics, q_a: torch.Tensor, q_b: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Closed-form two-view depths of matches in the first camera.

    Returns (z_x, valid_x, z_y, valid_y): one depth per image coordinate,
    invalid where the epipolar geometry is degenerate for that coordinate.
    """
    ones = torch.ones(q_a.shape[0], 1, dtype=q_a.dtype)
    a = torch.cat([(q_a[:, :1] - intr.cx) / intr.fx, (q_a[:, 1:2] - intr.cy) / intr.fy, ones], 1)
    bx = (q_b[:, 0] - intr.cx) / intr.fx
    by = (q_b[:, 1] - intr.cy) / intr.fy
    rot, t = rel_pose[:3, :3], rel_pose[:3, 3]
    r1a = a @ rot[0]
    r2a = a @ rot[1]
    r3a = a @ rot[2]
    den_x = bx * r3a - r1a
    den_y = by * r3a - r2a
    valid_x = torch.abs(den_x) >= 1e-9
    valid_y = torch.abs(den_y) >= 1e-9
    safe_x = torch.where(valid_x, den_x, torch.ones_like(den_x))
    safe_y = torch.where(valid_y, den_y, torch.ones_like(den_y))
    z_x = (t[0] - bx * t[2]) / safe_x
    z_y = (t[1] - by * t[2]) / safe_y
    return z_x, valid_x, z_y, valid_y


def tukey(residual: torch.Tensor, c: float) -> torch.Tensor:
    """Tukey biweight rho-function, saturating at c^2/6 beyond |r| = c."""
    r = torch.as_tensor(residual, dtype=DTYPE) if not torch.is_tensor(residual) else residual
    scaled = torch.clamp((r / c) ** 2, max=1.0)
    return (c * c / 6.0) * (1.0 - (1.0 - scaled) ** 3)


def triangulation_loss(
    field: SplatField,
    pose_a: torch.Tensor,
    pose_b: torch.Tensor,
    intr: Intrinsics,
    q_a: torch.Tensor,
    q_b: torch.Tensor,
    tukey_c: float,
) -> tuple[torch.Tensor, dict]:
    """Tukey-robust agreement of triangulated and rendered depth at q_a.

    Gradients reach the extrinsic both through the closed-form depths
    (relative pose) and through the rendered depth (ray pose).
    """
    if q_a.shape[0] == 0:
        log.warning("triangulation loss: empty correspondence set")
        return torch.zeros((), dtype=DTYPE), {"used": 0}
    origins, dirs, cos = pixel_rays_batch(intr, pose_a, q_a)
    bundle = composite_rays(field, origins, dirs)
    zbar = bundle.depth * cos
    covered = bundle.weight_sum.detach() >= MIN_COVERAGE

    rel = relative_pose(pose_a, pose_b)
    z_x, valid_x, z_y, valid_y = triangulate_depth(rel, intr, q_a, q_b)
    valid_x = valid_x & covered
    valid_y = valid_y & covered
    term_x = torch.where(valid_x, tukey(z_x - zbar, tukey_c), torch.zeros_like(z_x))
    term_y = torch.where(valid_y, tukey(z_y - zbar, tukey_c), torch.zeros_like(z_y))
    any_valid = valid_x | valid_y
    n_used = int(any_valid.sum())
    if n_used == 0:
        return torch.zeros((), dtype=DTYPE), {"used": 0}
    loss = 0.5 * (term_x + term_y).sum() / n_used
    return loss, {"used": n_used}


# ---------------------------------------------------------------------------
# joint optimization
# ---------------------------------------------------------------------------


@dataclass
class CalibResult:
    estimate: ExtrinsicEstimate
    field: SplatField
    history: list[dict] = dc_field(default_factory=list)
    events: list[tuple[int, str]] = dc_field(default_factory=list)


def _stride_for_iter(cfg: CalibConfig, it: int) -> int:
    milestones = len(cfg.stride_schedule)
    phase = min(it * milestones // max(cfg.iters, 1), milestones - 1)
    return cfg.stride_schedule[phase]


def calibrate(
    field: SplatField,
    cam_frames: list[CameraFrame],
    lidar_poses: list[torch.Tensor],
    correspondences: CorrespondenceSet,
    intr: Intrinsics,
    cfg: CalibConfig,
    xi_init: torch.Tensor,
) -> CalibResult:
    """Minimize L_ph + lambda_t L_tr + lambda_r L_repr over colors and xi."""
    if not field.frozen_geometry:
        raise ValueError("calibrate requires a field with frozen geometry")
    for f in cam_frames:
        f.check_size(intr)
    geometry_before = field.raw_matrix()[:, :10].copy()

    rho = xi_init[:3].clone().detach().requires_grad_(True)
    phi = xi_init[3:].clone().detach().requires_grad_(True)
    field.requires_grad_(geometry=False, colors=True)
    optimizer = torch.optim.Adam(
        [
            {"params": [phi], "lr": cfg.lr_rot_initial, "name": "rot"},
            {"params": [rho], "lr": cfg.lr_trans_initial, "name": "trans"},
            {"params": [field.colors], "lr": cfg.lr_color, "name": "color"},
        ],
        betas=cfg.adam_betas,
        eps=cfg.adam_eps,
    )
    gen = torch.Generator().manual_seed(cfg.seed)
    n_frames = len(cam_frames)
    events: list[tuple[int, str]] = []
    history: list[dict] = []
    phase = 0  # 0: rotation-first lrs, 1: translation lrs, 2/3: halvings
    phi_window: deque = deque(maxlen=cfg.schedule_window + 1)
    trans_steps: deque = deque(maxlen=cfg.schedule_window)
    mask_cache: dict[tuple[int, int], tuple[int, dict]] = {}

    def set_lrs(lr_rot: float | None = None, lr_trans: float | None = None, halve: bool = False):
        for g in optimizer.param_groups:
            if g["name"] == "rot":
                g["lr"] = g["lr"] / 2 if halve else lr_rot
            elif g["name"] == "trans":
                g["lr"] = g["lr"] / 2 if halve else lr_trans

    warmup = cfg.color_warmup > 0
    if warmup:
        set_lrs(lr_rot=0.0, lr_trans=0.0)

    for it in range(cfg.iters):
        if warmup and it >= cfg.color_warmup:
            warmup = False
            set_lrs(lr_rot=cfg.lr_rot_initial, lr_trans=cfg.lr_trans_initial)
            phi_window.clear()
            trans_steps.clear()
            events.append((it, "color-warmup->joint"))
        xi = torch.cat([rho, phi])
        t_e = se3_exp(xi)
        stride = _stride_for_iter(cfg, it)

        # photometric over a random frame subset
        frame_ids = torch.randperm(n_frames, generator=gen)[: cfg.frames_per_iter].tolist()
        per_frame = max(cfg.batch_pixels // max(len(frame_ids), 1), 1)
        l_ph = torch.zeros((), dtype=DTYPE)
        n_ph = 0
        for fi in frame_ids:
            pose = t_e @ lidar_poses[cam_frames[fi].lidar_index]
            px = torch.stack(
                [
                    torch.randint(0, intr.width, (per_frame,), generator=gen),
                    torch.randint(0, intr.height, (per_frame,), generator=gen),
                ],
                dim=1,
            ).to(DTYPE)
            loss, info = photometric_loss(
                field, cam_frames[fi].image, pose, intr, px, use_weights=cfg.use_uncertainty_weights
            )
            if not info["flagged"]:
                l_ph = l_ph + loss
                n_ph += 1
        if n_ph > 0:
            l_ph = l_ph / n_ph

        # interframe losses on one random consecutive pair
        l_repr = torch.zeros((), dtype=DTYPE)
        l_tr = torch.zeros((), dtype=DTYPE)
        if n_frames >= 2 and not warmup:
            pair = int(torch.randint(0, n_frames - 1, (1,), generator=gen))
            pose_a = t_e @ lidar_poses[cam_frames[pair].lidar_index]
            pose_b = t_e @ lidar_poses[cam_frames[pair + 1].lidar_index]
            if cfg.lambda_r > 0:
                key = (pair, stride)
                cached = mask_cache.get(key)
                if cached is None or it - cached[0] >= cfg.mask_refresh:
                    with torch.no_grad():
                        maps = render_view(field, intr, pose_b.detach(), stride=stride)
                    mask_cache[key] = (it, maps)
                else:
                    maps = cached[1]
                l_repr, _ = reprojection_loss(
                    field,
                    cam_frames[pair].image,
                    cam_frames[pair + 1].image,
                    pose_a,
                    pose_b,
                    intr,
                    stride,
                    cfg.theta2,
                    target_maps=maps,
                )
            if cfg.lambda_t > 0 and len(correspondences) > 0:
                q_a, q_b = correspondences.for_pair(pair)
                if q_a.shape[0] > cfg.corr_per_pair:
                    sel = torch.randperm(q_a.shape[0], generator=gen)[: cfg.corr_per_pair]
                    q_a, q_b = q_a[sel], q_b[sel]
                l_tr, _ = triangulation_loss(
                    field, pose_a, pose_b, intr, q_a, q_b, cfg.tukey_c
                )

        total = l_ph + cfg.lambda_t * l_tr + cfg.lambda_r * l_repr
        if not torch.isfinite(total):
            raise RuntimeError(
                f"non-finite calibration loss at iteration {it}: "
                f"ph={float(l_ph.detach()):.6g} tr={float(l_tr.detach()):.6g} "
                f"repr={float(l_repr.detach()):.6g} "
                f"xi={xi.detach().tolist()}"
            )
        optimizer.zero_grad()
        total.backward()
        t_before = rho.detach().clone()
        optimizer.step()
        with torch.no_grad():
            field.colors.clamp_(0.0, 1.0)
        trans_steps.append(float(torch.linalg.norm(rho.detach() - t_before)))
        phi_window.append(phi.detach().clone())

        # learning-rate schedule state machine
        if warmup:
            pass
        elif phase == 0 and len(phi_window) > cfg.schedule_window:
            from .geometry import so3_exp, so3_log

            delta = so3_log(so3_exp(phi_window[0]).T @ so3_exp(phi_window[-1]))
            change_deg = math.degrees(float(torch.linalg.norm(delta)))
            if change_deg < cfg.rot_converged_deg:
                set_lrs(lr_rot=cfg.lr_rot_second, lr_trans=cfg.lr_trans_second)
                events.append((it, "rotation-phase->translation-phase"))
                phase = 1
                trans_steps.clear()
        elif (
            phase >= 1
            and phase - 1 < len(cfg.trans_halve_thresholds)
            and len(trans_steps) == cfg.schedule_window
        ):
            rate = sum(trans_steps) / len(trans_steps)
            threshold = cfg.trans_halve_thresholds[phase - 1]
            if rate < threshold:
                set_lrs(halve=True)
                events.append((it, f"halving-{phase} (rate {rate:.2e} < {threshold:.0e})"))
                phase += 1
                trans_steps.clear()

        if it % 50 == 0 or it == cfg.iters - 1:
            history.append(
                {
                    "iter": it,
                    "photometric": float(l_ph.detach()),
                    "triangulation": float(l_tr.detach()),
                    "reprojection": float(l_repr.detach()),
                    "total": float(total.detach()),
                    "stride": stride,
                    "xi": torch.cat([rho, phi]).detach().tolist(),
                }
            )

    geometry_after = field.raw_matrix()[:, :10]
    if not np.array_equal(geometry_before, geometry_after):
        raise RuntimeError("frozen geometry changed during calibration")
    field.requires_grad_(geometry=False, colors=False)
    return CalibResult(
        estimate=ExtrinsicEstimate(xi=torch.cat([rho, phi]).detach()),
        field=field,
        history=history,
        events=events,
    )
