"""Fit splat geometry and depth uncertainty to LiDAR frames.

Stages: seed splats from voxel-downsampled clouds (ground split via RANSAC),
then run Adam on the raw splat parameters against depth, uncertainty,
distortion and normal-consistency losses, inserting new splats where the
rendered depth overshoots the measurement.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from .geometry import DTYPE, pose_inverse
from .render import MIN_COVERAGE, composite_rays
from .splats import SplatField, frame_from_normal, inverse_sigmoid, inverse_softplus, rotation_to_quat

log = logging.getLogger(__name__)


class FitDivergence(RuntimeError):
    pass


@dataclass
class LidarFrame:
    """One LiDAR scan: sensor-frame points, world-to-sensor pose, normals.

    ``normals`` are world-space unit normals per point, oriented toward the
    sensor.  Use ``estimate_normals`` when the source data has none.
    """

    points: torch.Tensor  # (N, 3), sensor frame
    pose: torch.Tensor  # (4, 4), world -> sensor
    normals: torch.Tensor | None = None

    def __post_init__(self):
        if self.points.shape[0] < 1:
            raise ValueError("LidarFrame needs at least one point")

    def origin_world(self) -> torch.Tensor:
        return pose_inverse(self.pose)[:3, 3]

    def points_world(self) -> torch.Tensor:
        inv = pose_inverse(self.pose)
        return self.points @ inv[:3, :3].T + inv[:3, 3]


@dataclass
class GeomFitConfig:
    """Knobs for the geometry stage.

    Loss weights apply to per-ray means, so they are batch-size independent;
    a weight quoted against a summed loss over a B-ray batch divides by B to
    land in these units (1e4 over 65536 rays -> 0.15 here).
    """

    lambda_dist: float = 0.15
    lambda_norm: float = 1e-1
    theta1: float = 0.5  # adaptation trigger (m)
    iters: int = 15000
    voxel_ground: float = 0.5
    voxel_nonground: float = 0.15
    batch_rays: int = 65536
    adapt_every: int = 500
    adapt_until: int = 10000
    prune_opacity: float = 0.005
    lr_position_scale: float = 1.6e-4  # times scene extent
    lr_rotation: float = 5e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_uncertainty: float = 1e-2
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-15
    init_opacity: float = 0.8
    init_uncertainty: float = 0.05
    ransac_iters: int = 200
    ransac_thresh: float = 0.15
    ground_max_angle_deg: float = 30.0
    up_axis: tuple[float, float, float] = (0.0, -1.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        for name in ["lambda_dist", "lambda_norm", "theta1", "voxel_ground", "voxel_nonground"]:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class RayTargets:
    """Flattened LiDAR supervision: one ray per point."""

    origins: torch.Tensor  # (R, 3)
    dirs: torch.Tensor  # (R, 3), unit
    ranges: torch.Tensor  # (R,), distance along the ray
    normals: torch.Tensor  # (R, 3), sensor-oriented reference normals


def build_ray_targets(frames: list[LidarFrame]) -> RayTargets:
    origins, dirs, ranges, normals = [], [], [], []
    for fr in frames:
        pw = fr.points_world()
        o = fr.origin_world()
        delta = pw - o
        r = torch.linalg.norm(delta, dim=1)
        good = r > 1e-9
        origins.append(o.expand_as(pw)[good])
        dirs.append((delta / r.unsqueeze(1))[good])
        ranges.append(r[good])
        if fr.normals is None:
            raise ValueError("frame has no normals; call estimate_normals first")
        n = fr.normals[good]
        # orient toward the sensor
        flip = ((n * dirs[-1]).sum(dim=1) > 0).unsqueeze(1)
        normals.append(torch.where(flip, -n, n))
    return RayTargets(
        torch.cat(origins), torch.cat(dirs), torch.cat(ranges), torch.cat(normals)
    )


def estimate_normals(frames: list[LidarFrame], k: int = 16) -> None:
    """Fill per-point world normals by k-NN plane fits over all frames."""
    from sklearn.neighbors import NearestNeighbors

    all_pts = torch.cat([fr.points_world() for fr in frames]).numpy()
    nn = NearestNeighbors(n_neighbors=min(k, len(all_pts))).fit(all_pts)
    _, idx = nn.kneighbors(all_pts)
    neigh = all_pts[idx]  # (M, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]  # smallest eigenvalue
    start = 0
    for fr in frames:
        n = fr.points.shape[0]
        fr.normals = torch.tensor(normals[start : start + n], dtype=DTYPE)
        start += n


def split_ground(
    points: np.ndarray, cfg: GeomFitConfig, rng: np.random.Generator
) -> np.ndarray:
    """RANSAC plane fit; returns a boolean ground mask."""
    n_pts = len(points)
    if n_pts < 3:
        return np.zeros(n_pts, dtype=bool)
    up = np.asarray(cfg.up_axis, dtype=np.float64)
    up = up / np.linalg.norm(up)
    cos_max = np.cos(np.radians(cfg.ground_max_angle_deg))
    best_mask = np.zeros(n_pts, dtype=bool)
    for _ in range(cfg.ransac_iters):
        tri = points[rng.choice(n_pts, 3, replace=False)]
        normal = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal /= norm
        if abs(normal @ up) < cos_max:
            continue
        dist = np.abs((points - tri[0]) @ normal)
        mask = dist < cfg.ransac_thresh
        if mask.sum() > best_mask.sum():
            best_mask = mask
    return best_mask


def voxel_downsample(
    points: np.ndarray, normals: np.ndarray, voxel: float
) -> tuple[np.ndarray, np.ndarray]:
    """Per-voxel centroids and mean normals, deterministic order."""
    keys = np.floor(points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    n_vox = len(counts)
    cent = np.zeros((n_vox, 3))
    nsum = np.zeros((n_vox, 3))
    np.add.at(cent, inverse, points)
    np.add.at(nsum, inverse, normals)
    cent /= counts[:, None]
    norms = np.linalg.norm(nsum, axis=1, keepdims=True)
    norms[norms < 1e-12] = 1.0
    return cent, nsum / norms


def seed_splats(frames: list[LidarFrame], cfg: GeomFitConfig) -> SplatField:
    """Seed one splat per retained voxel point, split ground/non-ground."""
    targets = build_ray_targets(frames)
    pts = (targets.origins + targets.dirs * targets.ranges.unsqueeze(1)).numpy()
    nrm = targets.normals.numpy()
    if len(pts) == 0:
        raise ValueError("no LiDAR points to seed from")
    rng = np.random.default_rng(cfg.seed)
    ground = split_ground(pts, cfg, rng)
    rows = []
    for mask, voxel in [(ground, cfg.voxel_ground), (~ground, cfg.voxel_nonground)]:
        if mask.sum() == 0:
            continue
        cent, cnrm = voxel_downsample(pts[mask], nrm[mask], voxel)
        scale = voxel / 2.0
        for c, n in zip(cent, cnrm):
            if np.linalg.norm(n) < 0.5:
                n = np.array([0.0, 0.0, 1.0])
            quat = rotation_to_quat(frame_from_normal(n))
            rows.append(
                np.concatenate(
                    [
                        c,
                        quat,
                        [np.log(scale), np.log(scale)],
                        [inverse_sigmoid(cfg.init_opacity)],
                        [0.5, 0.5, 0.5],
                        [inverse_softplus(cfg.init_uncertainty)],
                    ]
                )
            )
    return SplatField.from_raw(np.stack(rows))


def geometric_loss(
    field: SplatField, targets: RayTargets, cfg: GeomFitConfig, indices: torch.Tensor | None = None
) -> dict[str, torch.Tensor]:
    """Depth, uncertainty, distortion and normal losses over a ray batch.

    The uncertainty loss blends with detached weights and a detached depth
    residual so its gradient reaches only the uncertainty parameters.
    """
    if indices is None:
        origins, dirs = targets.origins, targets.dirs
        ranges, ref_n = targets.ranges, targets.normals
    else:
        origins, dirs = targets.origins[indices], targets.dirs[indices]
        ranges, ref_n = targets.ranges[indices], targets.normals[indices]
    bundle = composite_rays(field, origins, dirs)
    covered = bundle.weight_sum.detach() >= MIN_COVERAGE
    n_cov = int(covered.sum())

    zero = torch.zeros((), dtype=origins.dtype)
    if n_cov > 0:
        l_depth = torch.abs(bundle.depth[covered] - ranges[covered]).mean()
        realized = torch.abs(bundle.depth.detach()[covered] - ranges[covered])
        l_unc = torch.abs(bundle.error_detached_blend[covered] - realized).mean()
    else:
        l_depth, l_unc = zero, zero.clone()

    w = bundle.omega_sorted
    z = bundle.depth_sorted
    pair = w.unsqueeze(2) * w.unsqueeze(1) * torch.abs(z.unsqueeze(2) - z.unsqueeze(1))
    l_dist = pair.sum(dim=(1, 2)).mean() / 2.0

    _, _, normal = field.frames()
    n_hit = normal[bundle.index_sorted]  # (B, K, 3)
    d_n = (dirs.unsqueeze(1) * n_hit).sum(dim=2)
    facing = torch.where(d_n > 0, -torch.ones_like(d_n), torch.ones_like(d_n))
    cos = facing * (ref_n.unsqueeze(1) * n_hit).sum(dim=2)
    l_norm = (w * (1.0 - cos)).sum(dim=1).mean()

    total = l_depth + l_unc + cfg.lambda_dist * l_dist + cfg.lambda_norm * l_norm
    return {
        "depth": l_depth,
        "uncertainty": l_unc,
        "distortion": l_dist,
        "normal": l_norm,
        "total": total,
        "covered": torch.tensor(n_cov),
        "skipped": torch.tensor(len(origins) - n_cov),
    }


@torch.no_grad()
def adapt_splats(
    field: SplatField, targets: RayTargets, cfg: GeomFitConfig, chunk: int = 16384
) -> int:
    """Insert splats at LiDAR points whose rendered depth overshoots.

    A ray with insufficient coverage counts as infinitely deep and also
    triggers.  Points behind the rendered surface trigger nothing.  New
    points are voxel-deduplicated at the non-ground resolution.
    """
    trigger_pts = []
    for start in range(0, len(targets.ranges), chunk):
        sl = slice(start, start + chunk)
        bundle = composite_rays(field, targets.origins[sl], targets.dirs[sl])
        covered = bundle.weight_sum >= MIN_COVERAGE
        overshoot = covered & (bundle.depth - targets.ranges[sl] > cfg.theta1)
        trig = overshoot | (~covered)
        if bool(trig.any()):
            pts = targets.origins[sl][trig] + targets.dirs[sl][trig] * targets.ranges[sl][
                trig
            ].unsqueeze(1)
            trigger_pts.append((pts, -targets.dirs[sl][trig]))
    if not trigger_pts:
        return 0
    pts = torch.cat([p for p, _ in trigger_pts]).numpy()
    nrm = torch.cat([n for _, n in trigger_pts]).numpy()
    cent, cnrm = voxel_downsample(pts, nrm, cfg.voxel_nonground)
    scale = cfg.voxel_nonground / 2.0
    rows = []
    for c, n in zip(cent, cnrm):
        quat = rotation_to_quat(frame_from_normal(n))
        rows.append(
            np.concatenate(
                [
                    c,
                    quat,
                    [np.log(scale), np.log(scale)],
                    [inverse_sigmoid(cfg.init_opacity)],
                    [0.5, 0.5, 0.5],
                    [inverse_softplus(cfg.init_uncertainty)],
                ]
            )
        )
    field.append_raw(np.stack(rows))
    return len(rows)


def _make_optimizer(field: SplatField, cfg: GeomFitConfig, extent: float) -> torch.optim.Adam:
    field.requires_grad_(geometry=True, colors=False)
    groups = [
        {"params": [field.positions], "lr": cfg.lr_position_scale * extent},
        {"params": [field.quats], "lr": cfg.lr_rotation},
        {"params": [field.log_scales], "lr": cfg.lr_scale},
        {"params": [field.opacity_logits], "lr": cfg.lr_opacity},
        {"params": [field.unc_raw], "lr": cfg.lr_uncertainty},
    ]
    return torch.optim.Adam(groups, betas=cfg.adam_betas, eps=cfg.adam_eps)


def fit_geometry(
    frames: list[LidarFrame],
    cfg: GeomFitConfig,
    field: SplatField | None = None,
) -> tuple[SplatField, list[dict]]:
    """Optimize splat geometry against the LiDAR rays; returns frozen field.

    History holds one record per 100 iterations (loss components and splat
    count), matching the checkpoint sidecar format.
    """
    targets = build_ray_targets(frames)
    if field is None:
        field = seed_splats(frames, cfg)
    pts = targets.origins + targets.dirs * targets.ranges.unsqueeze(1)
    extent = float(torch.linalg.norm(pts.max(dim=0).values - pts.min(dim=0).values))
    extent = max(extent, 1e-6)

    gen = torch.Generator().manual_seed(cfg.seed)
    optimizer = _make_optimizer(field, cfg, extent)
    history: list[dict] = []
    n_rays = len(targets.ranges)
    for it in range(cfg.iters):
        if n_rays <= cfg.batch_rays:
            idx = None
        else:
            idx = torch.randperm(n_rays, generator=gen)[: cfg.batch_rays]
        losses = geometric_loss(field, targets, cfg, idx)
        if not torch.isfinite(losses["total"]):
            raise FitDivergence(
                f"non-finite geometric loss at iteration {it}: "
                + ", ".join(f"{k}={float(v):.6g}" for k, v in losses.items() if v.ndim == 0)
            )
        optimizer.zero_grad()
        losses["total"].backward()
        optimizer.step()

        if it % 100 == 0:
            history.append(
                {
                    "iter": it,
                    "depth": float(losses["depth"].detach()),
                    "uncertainty": float(losses["uncertainty"].detach()),
                    "distortion": float(losses["distortion"].detach()),
                    "normal": float(losses["normal"].detach()),
                    "total": float(losses["total"].detach()),
                    "splats": len(field),
                }
            )
        if (
            cfg.adapt_every > 0
            and it > 0
            and it % cfg.adapt_every == 0
            and it <= cfg.adapt_until
        ):
            with torch.no_grad():
                keep = field.opacities.detach() >= cfg.prune_opacity
            if int(keep.sum()) < len(field):
                field.keep(keep)
            adapt_splats(field, targets, cfg)
            optimizer = _make_optimizer(field, cfg, extent)
            log.debug("iter %d: adapted field to %d splats", it, len(field))

    field.requires_grad_(geometry=False, colors=False)
    field.frozen_geometry = True
    return field, history


def densify_clone(
    field: SplatField, factor: int, jitter_frac: float = 0.5, seed: int = 0
) -> SplatField:
    """Clone each splat ``factor - 1`` extra times with tangential jitter."""
    if factor <= 1:
        return field
    rng = np.random.default_rng(seed)
    raw = field.raw_matrix()
    lu, lv, _ = field.frames()
    scales = field.scales.detach().numpy()
    blocks = [raw]
    for _ in range(factor - 1):
        jit = raw.copy()
        du = rng.normal(scale=jitter_frac, size=len(raw)) * scales[:, 0]
        dv = rng.normal(scale=jitter_frac, size=len(raw)) * scales[:, 1]
        jit[:, 0:3] += du[:, None] * lu.numpy() + dv[:, None] * lv.numpy()
        blocks.append(jit)
    out = SplatField.from_raw(np.concatenate(blocks), frozen_geometry=field.frozen_geometry)
    return out
