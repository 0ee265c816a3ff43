"""Central-finite-difference oracles for every loss in the pipeline.

Each check builds a seeded random fixture, evaluates the loss as a pure
function of a flat parameter vector, and compares the autograd gradient
against central differences (h = 1e-5) by relative L2 error.  Fixtures are
constructed away from the renderer's discrete boundaries (support cutoff,
alpha skip, coverage and occlusion gates) so the differences sample the
smooth branch the gradients are defined on.

The uncertainty loss is checked over the uncertainty parameters only: by
construction it blends with detached weights and a detached depth
residual, so its gradient w.r.t. every other splat parameter is exactly
zero (asserted separately in the test suite).
"""

from __future__ import annotations

import numpy as np
import torch

from .calib import photometric_loss, reprojection_loss, triangulation_loss
from .geom_fit import GeomFitConfig, RayTargets, geometric_loss
from .geometry import DTYPE, Intrinsics, se3_exp
from .splats import FLOATS_PER_SPLAT, Splat2D, SplatField

FD_STEP = 1e-5


def central_difference(fn, params: torch.Tensor, h: float = FD_STEP) -> torch.Tensor:
    """Gradient of scalar ``fn`` at ``params`` by central differences."""
    flat = params.detach().reshape(-1).clone()
    grad = torch.zeros_like(flat)
    for i in range(flat.numel()):
        for sign in (1.0, -1.0):
            p = flat.clone()
            p[i] += sign * h
            grad[i] += sign * float(fn(p.reshape(params.shape)))
    return (grad / (2.0 * h)).reshape(params.shape)


def autograd_gradient(fn, params: torch.Tensor) -> torch.Tensor:
    p = params.detach().clone().requires_grad_(True)
    loss = fn(p)
    grad = torch.autograd.grad(loss, p, allow_unused=True)[0]
    return torch.zeros_like(p) if grad is None else grad


def relative_error(g_fd: torch.Tensor, g_an: torch.Tensor) -> float:
    denom = max(float(g_fd.norm()), float(g_an.norm()), 1e-12)
    return float((g_fd - g_an).norm()) / denom


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------


def _random_field_raw(rng: np.random.Generator, n: int = 8) -> torch.Tensor:
    """Raw (N, 14) parameters for a cluster of well-behaved splats."""
    splats = []
    for _ in range(n):
        nrm = rng.normal(size=3)
        nrm[2] -= 1.5  # keep normals angled toward the camera
        nrm /= np.linalg.norm(nrm)
        splats.append(
            Splat2D(
                center=rng.uniform([-1.5, -1.0, 3.0], [1.5, 1.0, 5.0]),
                normal=nrm,
                scale_u=rng.uniform(0.8, 1.4),
                scale_v=rng.uniform(0.8, 1.4),
                opacity=rng.uniform(0.55, 0.85),
                color=tuple(rng.uniform(0.1, 0.9, 3)),
                uncertainty=rng.uniform(0.02, 0.2),
            )
        )
    return torch.from_numpy(np.stack([s.raw() for s in splats]))


def _rays_toward_field(rng: np.random.Generator, raw: torch.Tensor, n_rays: int) -> RayTargets:
    """Rays from near the origin aimed at jittered splat centers."""
    centers = raw[:, :3].numpy()
    idx = rng.integers(0, len(centers), size=n_rays)
    targets = centers[idx] + rng.normal(scale=0.25, size=(n_rays, 3))
    origins = rng.normal(scale=0.2, size=(n_rays, 3))
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    ranges = np.linalg.norm(targets - origins, axis=1) + rng.normal(scale=0.05, size=n_rays)
    normals = rng.normal(size=(n_rays, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return RayTargets(
        origins=torch.tensor(origins, dtype=DTYPE),
        dirs=torch.tensor(dirs, dtype=DTYPE),
        ranges=torch.tensor(ranges, dtype=DTYPE),
        normals=torch.tensor(normals, dtype=DTYPE),
    )


_GEOM_CFG = GeomFitConfig(iters=1, batch_rays=64)
_INTR = Intrinsics(fx=30.0, fy=30.0, cx=16.0, cy=12.0, width=32, height=24)


def _check_geometry_component(component: str, seed: int) -> float:
    rng = np.random.default_rng(seed)
    raw = _random_field_raw(rng)
    targets = _rays_toward_field(rng, raw, n_rays=24)

    if component == "uncertainty":
        base = raw.clone()

        def fn(unc: torch.Tensor):
            full = base.clone()
            full[:, 13] = unc
            field = SplatField.from_raw_tensor(full)
            return geometric_loss(field, targets, _GEOM_CFG)[component]

        params = raw[:, 13].clone()
    else:

        def fn(p: torch.Tensor):
            field = SplatField.from_raw_tensor(p)
            return geometric_loss(field, targets, _GEOM_CFG)[component]

        params = raw.clone()
    return relative_error(central_difference(fn, params), autograd_gradient(fn, params))


def _calib_fixture(seed: int):
    """Frozen random field, two nearby poses, target images, matches."""
    rng = np.random.default_rng(seed)
    raw = _random_field_raw(rng, n=10)
    raw[:, 7:9] = np.log(1.6)  # broad splats: full image coverage
    field = SplatField.from_raw(raw.numpy(), frozen_geometry=True)
    p_l_a = se3_exp(torch.tensor(rng.normal(scale=0.02, size=6), dtype=DTYPE))
    step = torch.tensor([0.01, 0.0, 0.04, 0.0, 0.004, 0.0], dtype=DTYPE)
    p_l_b = se3_exp(step) @ p_l_a
    xi0 = torch.tensor(rng.normal(scale=0.01, size=6), dtype=DTYPE)
    image_a = torch.tensor(rng.uniform(0.2, 0.8, size=(24, 32, 3)))
    image_b = torch.tensor(rng.uniform(0.2, 0.8, size=(24, 32, 3)))
    pixels = torch.stack(
        [
            torch.tensor(rng.uniform(4, 27, size=24)),
            torch.tensor(rng.uniform(4, 19, size=24)),
        ],
        dim=1,
    ).floor()
    q_a = torch.stack(
        [
            torch.tensor(rng.uniform(6, 25, size=16)),
            torch.tensor(rng.uniform(6, 17, size=16)),
        ],
        dim=1,
    )
    q_b = q_a + torch.tensor(rng.uniform(-1.5, 1.5, size=(16, 2)))
    return field, p_l_a, p_l_b, xi0, image_a, image_b, pixels, q_a, q_b


def _check_photometric(seed: int) -> float:
    field, p_l, _, xi0, image, _, pixels, _, _ = _calib_fixture(seed)
    n = len(field)
    base_colors = field.colors.detach().clone()
    params = torch.cat([xi0, base_colors.reshape(-1)])

    def fn(p: torch.Tensor):
        field.colors = p[6 : 6 + 3 * n].reshape(n, 3)
        loss, _ = photometric_loss(field, image, se3_exp(p[:6]) @ p_l, _INTR, pixels)
        return loss

    return relative_error(central_difference(fn, params), autograd_gradient(fn, params))


def _check_reprojection(seed: int) -> float:
    field, p_l_a, p_l_b, xi0, image_a, image_b, _, _, _ = _calib_fixture(seed)

    def fn(xi: torch.Tensor):
        t_e = se3_exp(xi)
        loss, _ = reprojection_loss(
            field, image_a, image_b, t_e @ p_l_a, t_e @ p_l_b, _INTR, stride=4, theta2=0.5
        )
        return loss

    return relative_error(central_difference(fn, xi0), autograd_gradient(fn, xi0))


def _check_triangulation(seed: int) -> float:
    field, p_l_a, p_l_b, xi0, _, _, _, q_a, q_b = _calib_fixture(seed)

    def fn(xi: torch.Tensor):
        t_e = se3_exp(xi)
        loss, _ = triangulation_loss(
            field, t_e @ p_l_a, t_e @ p_l_b, _INTR, q_a, q_b, tukey_c=1.0
        )
        return loss

    return relative_error(central_difference(fn, xi0), autograd_gradient(fn, xi0))


CHECKS = {
    "depth": _check_geometry_component,
    "distortion": _check_geometry_component,
    "normal": _check_geometry_component,
    "uncertainty": _check_geometry_component,
    "photometric": lambda _, seed: _check_photometric(seed),
    "reprojection": lambda _, seed: _check_reprojection(seed),
    "triangulation": lambda _, seed: _check_triangulation(seed),
}


def run_gradcheck(seed: int = 0, fixtures_per_loss: int = 10) -> dict[str, float]:
    """Max relative FD error per loss over seeded random fixtures."""
    results: dict[str, float] = {}
    for name, check in CHECKS.items():
        errs = [check(name, seed * 1000 + k) for k in range(fixtures_per_loss)]
        results[name] = max(errs)
    return results
