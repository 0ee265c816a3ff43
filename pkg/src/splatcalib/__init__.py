"""Targetless LiDAR-camera extrinsic calibration via 2D Gaussian splats.

Pipeline: fit a splat field to LiDAR depth (:mod:`geom_fit`), freeze its
geometry, then jointly optimize splat colors and the six extrinsic
parameters against camera images with photometric, reprojection and
triangulation losses (:mod:`calib`).  :mod:`synth` provides an exact
simulator for end-to-end validation; :mod:`experiment` pins down the
reproducible desk-scale protocols.
"""

from .calib import (
    CalibConfig,
    CameraFrame,
    CorrespondenceSet,
    ExtrinsicEstimate,
    calibrate,
    photometric_loss,
    reproject_pixel,
    reprojection_loss,
    triangulate_depth,
    triangulation_loss,
)
from .diagnostics import GradientDiagnostics, extrinsic_gradient_analytic
from .estimators import ExtrinsicCalibrator, GeometrySplatFitter
from .geom_fit import GeomFitConfig, LidarFrame, fit_geometry, geometric_loss, seed_splats
from .geometry import (
    Intrinsics,
    apply_bias,
    pose_error,
    se3_exp,
    se3_log,
)
from .gradcheck import run_gradcheck
from .io import RunConfig
from .render import composite_rays, render_view, sample_ray
from .splats import Splat2D, SplatField

__version__ = "0.1.0"

__all__ = [
    "CalibConfig",
    "CameraFrame",
    "CorrespondenceSet",
    "ExtrinsicCalibrator",
    "ExtrinsicEstimate",
    "GeomFitConfig",
    "GeometrySplatFitter",
    "GradientDiagnostics",
    "Intrinsics",
    "LidarFrame",
    "RunConfig",
    "Splat2D",
    "SplatField",
    "apply_bias",
    "calibrate",
    "composite_rays",
    "extrinsic_gradient_analytic",
    "fit_geometry",
    "geometric_loss",
    "photometric_loss",
    "pose_error",
    "render_view",
    "reproject_pixel",
    "reprojection_loss",
    "run_gradcheck",
    "sample_ray",
    "se3_exp",
    "se3_log",
    "seed_splats",
    "triangulate_depth",
    "triangulation_loss",
]
