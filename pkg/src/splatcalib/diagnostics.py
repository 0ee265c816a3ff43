"""Hand-derived photometric gradient w.r.t. the extrinsic transform.

This module re-implements, without autograd, the chain rule that carries the
photometric loss back to the elementwise entries of the extrinsic 4x4
transform.  It exists as an independent cross-check of the production
gradient path (autograd through ``photometric_loss``) and as the analysis
tool behind the translation-degeneracy diagnostic: the per-splat update
direction decomposes into a component tangential to the splat plane (h) and
a normal component whose coefficient <d, h>/<d, n> blows up when rays graze
a splat, and which vanishes informatively when all normals align.

Derivation sketch.  For a pixel ray with camera-space unit direction r and
world pose M = T @ P_L (world-to-camera), the forward model uses
o = -(A R_L)^T (A tau_L + b) and d = (A R_L)^T r, where A = T[:3,:3],
b = T[:3,3] and P_L = [R_L | tau_L].  The splat intersection is
p_hat = o + t d with t = <p - o, n>/<d, n>, and u = <p_hat - p, l_u>/s_u.
The loss reaches p_hat only through (u, v), so
dL/dT_mn = sum_i <h_i, dp_hat_i/dT_mn> with
h_i = (dL/du_i) l_u/s_u + (dL/dv_i) l_v/s_v, and the variation of t folds
into the oblique projection a_i = h_i - n_i <d, h_i>/<d, n_i>, giving
dL = a_i . (do + t dd) for any perturbation of the pose entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .render import (
    ALPHA_SKIP,
    NEAR_CLIP,
    NORMAL_EPS,
    SUPPORT_R2,
    TRANSMITTANCE_FLOOR,
    composite_rays,
)

DEGENERATE_COS = 1e-6  # |<d, n>| below this flags a grazing (unreliable) hit


@dataclass
class GradientDiagnostics:
    """Analytic gradient of the photometric loss plus per-hit decomposition.

    ``grad`` is dL/dT for the extrinsic entries (bottom row zero: the
    forward model never reads it).  Per-hit arrays are (B, K) over the
    sorted hits of each ray; entries outside ``active`` are zero.
    """

    grad: torch.Tensor  # (4, 4)
    h: torch.Tensor  # (B, K, 3) tangential update directions, world frame
    normal_coeff: torch.Tensor  # (B, K)  <d, h>/<d, n>
    cos_dn: torch.Tensor  # (B, K)  <d, n>
    active: torch.Tensor  # (B, K) bool, hits that carry gradient
    degenerate: torch.Tensor  # (B, K) bool, grazing hits excluded from grad
    degenerate_count: int
    loss: float


@torch.no_grad()
def extrinsic_gradient_analytic(
    field,
    image: torch.Tensor,
    t_e: torch.Tensor,
    lidar_pose: torch.Tensor,
    intr,
    pixels: torch.Tensor,
    use_weights: bool = True,
) -> GradientDiagnostics:
    """dL_ph/dT by hand-rolled chain rule, with per-splat diagnostics.

    Mirrors ``photometric_loss(field, image, t_e @ lidar_pose, intr,
    pixels)``: same hit selection, compositing gates and batch
    normalization, so the result is directly comparable to autograd on the
    production path.  Hits with |<d, n>| < DEGENERATE_COS are flagged and
    excluded from the gradient sum (their normal coefficient is unbounded).

    The uncertainty weight factor is treated as a constant, as in the
    derivation; its own gradient path scales with the blended uncertainty,
    so compare against autograd on low-uncertainty fields or with
    ``use_weights=False`` for exact agreement.
    """
    dtype = t_e.dtype
    cam_pose = t_e @ lidar_pose
    rot = cam_pose[:3, :3]
    origin = (-rot.T @ cam_pose[:3, 3]).reshape(1, 3)

    pixels = pixels.reshape(-1, 2).to(dtype)
    ones = torch.ones(pixels.shape[0], 1, dtype=dtype)
    d_cam = torch.cat(
        [(pixels[:, :1] - intr.cx) / intr.fx, (pixels[:, 1:2] - intr.cy) / intr.fy, ones],
        dim=1,
    )
    r_cam = d_cam / torch.linalg.norm(d_cam, dim=1, keepdim=True)  # (B, 3)
    dirs = r_cam @ rot  # R^T r, world frame

    bundle = composite_rays(field, origin.expand_as(dirs), dirs)
    idx = bundle.index_sorted  # (B, K)

    # Recompute per-hit geometry on the selected index set (same formulas as
    # the renderer, kept explicit here because the backward pass below needs
    # every intermediate).
    l_u, l_v, normal = field.frames()
    n_k = normal[idx]
    lu_k, lv_k = l_u[idx], l_v[idx]
    p_k = field.positions[idx]
    s_k = field.scales[idx]
    o3 = origin.unsqueeze(1)
    d3 = dirs.unsqueeze(1)

    dn = (d3 * n_k).sum(dim=-1)  # (B, K)
    parallel = torch.abs(dn) < NORMAL_EPS
    safe_dn = torch.where(parallel, torch.ones_like(dn), dn)
    t = ((p_k - o3) * n_k).sum(dim=-1) / safe_dn
    valid = (~parallel) & (t > NEAR_CLIP)
    t = torch.where(valid, t, torch.zeros_like(t))

    rel = o3 + t.unsqueeze(-1) * d3 - p_k
    u = (rel * lu_k).sum(dim=-1) / s_k[..., 0]
    v = (rel * lv_k).sum(dim=-1) / s_k[..., 1]
    r2 = u * u + v * v
    alpha = field.opacities[idx] * torch.exp(-0.5 * torch.clamp(r2, max=80.0))
    valid = valid & (r2 <= SUPPORT_R2) & (alpha >= ALPHA_SKIP)
    alpha = torch.where(valid, alpha, torch.zeros_like(alpha))

    trans = torch.cumprod(1.0 - alpha, dim=1)
    t_before = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=1)
    omega = alpha * t_before
    active = valid & (t_before >= TRANSMITTANCE_FLOOR)
    omega = torch.where(active, omega, torch.zeros_like(omega))

    c_k = field.rgb[idx]  # (B, K, 3)
    color = (omega.unsqueeze(-1) * c_k).sum(dim=1)
    xi_pix = pixels.long()
    target = image[xi_pix[:, 1], xi_pix[:, 0]]
    diff = color - target
    sq = (diff**2).sum(dim=1)
    if use_weights:
        w = torch.exp(-(omega * field.uncertainties[idx]).sum(dim=1))
    else:
        w = torch.ones_like(sq)
    w_sum = w.sum()
    loss = float((w * sq).sum() / w_sum)

    # --- backward through the blend: dL/dalpha_j -------------------------
    g_c = (2.0 * w / w_sum).unsqueeze(-1) * diff  # (B, 3) = dL/dcolor
    gc_dot_c = (g_c.unsqueeze(1) * c_k).sum(dim=-1)  # (B, K)
    contrib = omega * gc_dot_c
    # suffix sum over later hits: sum_{m > j} omega_m (g_c . c_m)
    suffix = contrib.flip(1).cumsum(dim=1).flip(1) - contrib
    one_minus = torch.clamp(1.0 - alpha, min=1e-12)
    dl_dalpha = gc_dot_c * t_before - suffix / one_minus
    dl_dalpha = torch.where(active, dl_dalpha, torch.zeros_like(dl_dalpha))

    dl_du = dl_dalpha * (-u) * alpha
    dl_dv = dl_dalpha * (-v) * alpha

    # --- tangential direction and normal decomposition -------------------
    h = dl_du.unsqueeze(-1) * lu_k / s_k[..., :1] + dl_dv.unsqueeze(-1) * lv_k / s_k[..., 1:2]
    degenerate = active & (torch.abs(dn) < DEGENERATE_COS)
    coeff_dn = torch.where(torch.abs(dn) < DEGENERATE_COS, torch.ones_like(dn), dn)
    d_dot_h = (d3 * h).sum(dim=-1)
    normal_coeff = torch.where(active, d_dot_h / coeff_dn, torch.zeros_like(dn))
    a = h - normal_coeff.unsqueeze(-1) * n_k
    carry = (active & ~degenerate).unsqueeze(-1)
    a = torch.where(carry, a, torch.zeros_like(a))

    # --- assemble dL/dT elementwise --------------------------------------
    r_l = lidar_pose[:3, :3]
    tau_l = lidar_pose[:3, 3]
    a_mat = t_e[:3, :3]
    tau_m = cam_pose[:3, 3]

    q = a @ r_l.T  # (B, K, 3), rows are R_L a_i
    s = q @ a_mat.T  # rows of A R_L a
    t_r = (t.unsqueeze(-1) * r_cam.unsqueeze(1)).reshape(-1, 3)  # t_i r_hat_i
    q_flat = q.reshape(-1, 3)
    s_sum = s.reshape(-1, 3).sum(dim=0)

    grad = torch.zeros(4, 4, dtype=dtype)
    grad[:3, :3] = (
        -torch.outer(tau_m, q_flat.sum(dim=0))
        - torch.outer(s_sum, tau_l)
        + t_r.T @ q_flat
    )
    grad[:3, 3] = -s_sum
    return GradientDiagnostics(
        grad=grad,
        h=torch.where(active.unsqueeze(-1), h, torch.zeros_like(h)),
        normal_coeff=normal_coeff,
        cos_dn=dn,
        active=active,
        degenerate=degenerate,
        degenerate_count=int(degenerate.sum()),
        loss=loss,
    )
