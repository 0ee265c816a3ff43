"""Estimator-style wrappers around the two pipeline stages.

Thin, familiar front doors: construct with a config, call ``fit`` with
data, read trailing-underscore attributes afterwards.  All heavy lifting
stays in :mod:`geom_fit` and :mod:`calib`.
"""

from __future__ import annotations

from dataclasses import replace

import torch

from .calib import CalibConfig, CameraFrame, CorrespondenceSet, ExtrinsicEstimate, calibrate
from .geom_fit import GeomFitConfig, LidarFrame, fit_geometry
from .geometry import DTYPE, Intrinsics, pose_error, se3_log
from .splats import SplatField


class GeometrySplatFitter:
    """Fits a frozen splat field to LiDAR scans.

    After ``fit``: ``field_`` (frozen SplatField), ``history_`` (loss
    records), ``n_splats_``.
    """

    def __init__(self, config: GeomFitConfig | None = None, **overrides):
        base = config if config is not None else GeomFitConfig()
        self.config = replace(base, **overrides) if overrides else base

    def fit(self, frames: list[LidarFrame], field: SplatField | None = None) -> "GeometrySplatFitter":
        self.field_, self.history_ = fit_geometry(frames, self.config, field=field)
        self.n_splats_ = len(self.field_)
        return self

    def render(self, intr: Intrinsics, cam_pose: torch.Tensor, stride: int = 1):
        from .render import render_view

        return render_view(self.field_, intr, cam_pose, stride=stride)


class ExtrinsicCalibrator:
    """Recovers the LiDAR-to-camera transform from a frozen field + images.

    After ``fit``: ``xi_`` (6-vector), ``pose_`` (4x4), ``estimate_``,
    ``history_``, ``events_``, ``field_`` (with fitted colors).
    """

    def __init__(self, config: CalibConfig | None = None, **overrides):
        base = config if config is not None else CalibConfig()
        self.config = replace(base, **overrides) if overrides else base

    def fit(
        self,
        field: SplatField,
        cam_frames: list[CameraFrame],
        lidar_poses: list[torch.Tensor],
        intr: Intrinsics,
        correspondences: CorrespondenceSet | None = None,
        xi_init: torch.Tensor | None = None,
    ) -> "ExtrinsicCalibrator":
        if correspondences is None:
            correspondences = CorrespondenceSet.empty()
        if xi_init is None:
            xi_init = torch.zeros(6, dtype=DTYPE)
        result = calibrate(
            field, cam_frames, lidar_poses, correspondences, intr, self.config, xi_init
        )
        self.estimate_: ExtrinsicEstimate = result.estimate
        self.pose_ = result.estimate.pose()
        self.xi_ = se3_log(self.pose_)
        self.history_ = result.history
        self.events_ = result.events
        self.field_ = result.field
        return self

    def score(self, xi_gt: torch.Tensor) -> tuple[float, float]:
        """(rotation deg, translation m) error of the fit against a GT xi."""
        from .geometry import se3_exp

        return pose_error(self.pose_, se3_exp(torch.as_tensor(xi_gt, dtype=DTYPE)))
