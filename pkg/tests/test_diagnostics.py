"""Tests for the closed-form extrinsic gradient diagnostic."""

import numpy as np
import torch

from splatcalib.calib import photometric_loss
from splatcalib.diagnostics import DEGENERATE_COS, extrinsic_gradient_analytic
from splatcalib.geometry import DTYPE, Intrinsics, se3_exp
from splatcalib.splats import Splat2D, SplatField

INTR = Intrinsics(fx=30.0, fy=30.0, cx=16.0, cy=12.0, width=32, height=24)


def random_field(n: int, seed: int, uncertainty: float = 1e-8) -> SplatField:
    rng = np.random.default_rng(seed)
    splats = []
    for _ in range(n):
        nrm = rng.normal(size=3)
        nrm /= np.linalg.norm(nrm)
        splats.append(
            Splat2D(
                center=rng.uniform([-2, -1.5, 3], [2, 1.5, 5]),
                normal=nrm,
                scale_u=rng.uniform(0.3, 0.8),
                scale_v=rng.uniform(0.3, 0.8),
                opacity=rng.uniform(0.3, 0.9),
                color=tuple(rng.uniform(0, 1, 3)),
                uncertainty=uncertainty,
            )
        )
    return SplatField.from_splats(splats, frozen_geometry=True)


def random_fixture(trial: int):
    g = torch.Generator().manual_seed(100 + trial)
    field = random_field(40, trial)
    lidar_pose = se3_exp((torch.rand(6, generator=g, dtype=DTYPE) - 0.5) * 0.2)
    t_e = se3_exp((torch.rand(6, generator=g, dtype=DTYPE) - 0.5) * 0.1)
    image = torch.rand(INTR.height, INTR.width, 3, generator=g, dtype=DTYPE)
    pixels = torch.stack(
        [
            torch.randint(0, INTR.width, (64,), generator=g),
            torch.randint(0, INTR.height, (64,), generator=g),
        ],
        dim=1,
    ).to(DTYPE)
    return field, image, t_e, lidar_pose, pixels


def autograd_reference(field, image, t_e, lidar_pose, pixels, use_weights):
    t = t_e.clone().requires_grad_(True)
    loss, _ = photometric_loss(
        field, image, t @ lidar_pose, INTR, pixels, use_weights=use_weights
    )
    loss.backward()
    return loss.detach(), t.grad


class TestAgreementWithAutograd:
    def test_matches_autograd_on_random_fixtures(self):
        for trial in range(3):
            field, image, t_e, lidar_pose, pixels = random_fixture(trial)
            loss_ref, grad_ref = autograd_reference(
                field, image, t_e, lidar_pose, pixels, use_weights=False
            )
            diag = extrinsic_gradient_analytic(
                field, image, t_e, lidar_pose, INTR, pixels, use_weights=False
            )
            rel = float((diag.grad - grad_ref).norm() / grad_ref.norm())
            assert rel < 1e-9, f"trial {trial}: rel err {rel:.3e}"
            assert abs(float(diag.loss) - float(loss_ref)) < 1e-12

    def test_matches_autograd_with_weights_on_sharp_field(self):
        # uncertainty ~1e-8 makes the (deliberately dropped) weight-gradient
        # path negligible, so the weighted form also agrees
        field, image, t_e, lidar_pose, pixels = random_fixture(7)
        _, grad_ref = autograd_reference(
            field, image, t_e, lidar_pose, pixels, use_weights=True
        )
        diag = extrinsic_gradient_analytic(
            field, image, t_e, lidar_pose, INTR, pixels, use_weights=True
        )
        rel = float((diag.grad - grad_ref).norm() / grad_ref.norm())
        assert rel < 1e-6

    def test_bottom_row_zero(self):
        field, image, t_e, lidar_pose, pixels = random_fixture(2)
        diag = extrinsic_gradient_analytic(
            field, image, t_e, lidar_pose, INTR, pixels, use_weights=False
        )
        assert float(diag.grad[3].abs().max()) == 0.0


class TestStationaryPoint:
    def test_zero_gradient_on_self_rendered_image(self):
        from splatcalib.render import render_view

        field = random_field(30, 11)
        eye = torch.eye(4, dtype=DTYPE)
        maps = render_view(field, INTR, eye, stride=1)
        image = maps["color"].clamp(0.0, 1.0)
        pixels = torch.stack(
            [
                torch.arange(4, 28, dtype=DTYPE),
                torch.full((24,), 12.0, dtype=DTYPE),
            ],
            dim=1,
        )
        diag = extrinsic_gradient_analytic(field, image, eye, eye, INTR, pixels)
        assert float(diag.grad.abs().max()) < 1e-10


class TestDegenerateDetector:
    def test_fronto_parallel_not_flagged(self):
        field = SplatField.from_splats(
            [
                Splat2D(
                    center=np.array([0.0, 0.0, 4.0]),
                    normal=np.array([0.0, 0.0, 1.0]),
                    scale_u=2.0,
                    scale_v=2.0,
                    opacity=0.9,
                )
            ],
            frozen_geometry=True,
        )
        eye = torch.eye(4, dtype=DTYPE)
        image = torch.full((INTR.height, INTR.width, 3), 0.2, dtype=DTYPE)
        pixels = torch.tensor([[INTR.cx, INTR.cy]], dtype=DTYPE)
        diag = extrinsic_gradient_analytic(field, image, eye, eye, INTR, pixels)
        assert int(diag.degenerate_count) == 0
        assert abs(float(diag.cos_dn[diag.active].abs().max()) - 1.0) < 1e-12

    def test_grazing_splat_flagged(self):
        # |<d, n>| ~ 1e-7 sits inside the (1e-9, 1e-6) band: the hit still
        # renders but the closed-form gradient marks it unreliable
        nrm = np.array([0.0, 1.0, 1e-7])
        nrm /= np.linalg.norm(nrm)
        field = SplatField.from_splats(
            [
                Splat2D(
                    center=np.array([0.0, 0.0, 4.0]),
                    normal=nrm,
                    scale_u=3.0,
                    scale_v=3.0,
                    opacity=0.9,
                )
            ],
            frozen_geometry=True,
        )
        eye = torch.eye(4, dtype=DTYPE)
        image = torch.full((INTR.height, INTR.width, 3), 0.2, dtype=DTYPE)
        pixels = torch.tensor([[INTR.cx, INTR.cy]], dtype=DTYPE)
        diag = extrinsic_gradient_analytic(field, image, eye, eye, INTR, pixels)
        assert int(diag.degenerate_count) >= 1
        flagged_cos = diag.cos_dn[diag.degenerate]
        assert bool((flagged_cos.abs() < DEGENERATE_COS).all())

    def test_threshold_is_exact(self):
        # construct hits just inside and just outside the cutoff
        for cos_target, expect_flag in [(0.5e-6, True), (2e-6, False)]:
            nrm = np.array([0.0, 1.0, cos_target])
            nrm /= np.linalg.norm(nrm)
            field = SplatField.from_splats(
                [
                    Splat2D(
                        center=np.array([0.0, 0.0, 4.0]),
                        normal=nrm,
                        scale_u=3.0,
                        scale_v=3.0,
                        opacity=0.9,
                    )
                ],
                frozen_geometry=True,
            )
            eye = torch.eye(4, dtype=DTYPE)
            image = torch.full((INTR.height, INTR.width, 3), 0.2, dtype=DTYPE)
            pixels = torch.tensor([[INTR.cx, INTR.cy]], dtype=DTYPE)
            diag = extrinsic_gradient_analytic(field, image, eye, eye, INTR, pixels)
            assert (int(diag.degenerate_count) > 0) == expect_flag, cos_target
