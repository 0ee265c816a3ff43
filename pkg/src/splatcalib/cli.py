"""Command-line surface: synth, fit-geom, calibrate, evaluate, render, gradcheck, sweep.

Exit codes: 0 success, 1 domain error (bad data, failed run), 2 usage
error (argparse).  The ``gradcheck`` subcommand additionally exits 1 when
any loss exceeds the finite-difference tolerance.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import torch

from . import io as sio
from .calib import CameraFrame, CorrespondenceSet, calibrate
from .geom_fit import LidarFrame, fit_geometry
from .geometry import DTYPE, GeometryError, pose_error, se3_exp, se3_log
from .splats import SplatField, SplatFormatError

GRADCHECK_TOL = 1e-4


def _cmd_synth(args) -> int:
    from .experiment import build_desk_dataset, desk_calib_config, desk_geom_config

    out = Path(args.out)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(exist_ok=True)
    spec = {"preset": args.preset}
    if args.texture_freq is not None:
        spec["texture_freq"] = args.texture_freq
    ds = build_desk_dataset(
        scene_spec=spec,
        n_frames=args.frames,
        seed=args.seed,
        lidar_sigma=args.lidar_sigma,
        corr_per_pair=args.correspondences_per_pair,
    )
    for i, (lf, cf) in enumerate(zip(ds.lidar_frames, ds.cam_frames)):
        sio.write_pointcloud(out / "clouds" / f"{i:03d}.bin", lf.points.numpy(), "kitti-bin")
        sio.write_pointcloud(out / "clouds" / f"{i:03d}.normals", lf.normals.numpy(), "ascii-xyz")
        sio.write_ppm(out / "images" / f"{i:03d}.ppm", cf.image)
    sio.write_poses(out / "poses.txt", ds.trajectory.lidar_poses)
    sio.write_correspondences(out / "correspondences.txt", ds.correspondences)
    sio.write_extrinsic(out / "gt.pose", ds.gt_xi, se3_exp(ds.gt_xi))
    intr = ds.intrinsics
    geom = desk_geom_config()
    with open(out / "run.cfg", "w") as fh:
        fh.write("# generated dataset configuration\n")
        fh.write("paths.clouds = clouds\npaths.poses = poses.txt\npaths.images = images\n")
        fh.write("paths.correspondences = correspondences.txt\npaths.output = out\n")
        for k in ("fx", "fy", "cx", "cy", "width", "height"):
            fh.write(f"intr.{k} = {getattr(intr, k)}\n")
        fh.write(f"seed = {args.seed}\n")
        fh.write("xi_gt = " + " ".join(f"{float(v):.17g}" for v in ds.gt_xi) + "\n")
        fh.write("xi_init = 0 0 0 0 0 0\n")
        for k in (
            "voxel_ground",
            "voxel_nonground",
            "iters",
            "batch_rays",
            "adapt_every",
            "adapt_until",
        ):
            fh.write(f"geom.{k} = {getattr(geom, k)}\n")
        calib = desk_calib_config()
        for k in (
            "iters",
            "color_warmup",
            "batch_pixels",
            "frames_per_iter",
            "corr_per_pair",
            "schedule_window",
            "mask_refresh",
            "lr_color",
            "lr_rot_initial",
            "lr_trans_initial",
            "lr_trans_second",
            "rot_converged_deg",
            "lambda_t",
            "lambda_r",
        ):
            fh.write(f"calib.{k} = {getattr(calib, k)}\n")
        fh.write("calib.stride_schedule = " + " ".join(str(s) for s in calib.stride_schedule) + "\n")
        fh.write(
            "calib.trans_halve_thresholds = "
            + " ".join(str(t) for t in calib.trans_halve_thresholds)
            + "\n"
        )
    print(f"dataset written to {out} ({args.frames} frames)")
    return 0


def _load_lidar_frames(cfg: sio.RunConfig) -> list[LidarFrame]:
    clouds_dir = Path(cfg.paths["clouds"])
    poses = sio.read_poses(cfg.paths["poses"])
    bins = sorted(clouds_dir.glob("*.bin"))
    if len(bins) != len(poses):
        raise ValueError(f"{len(bins)} clouds but {len(poses)} poses")
    frames = []
    for path, pose in zip(bins, poses):
        pts = sio.read_pointcloud(path, "kitti-bin")
        normals_path = path.with_suffix(".normals")
        if not normals_path.exists():
            raise ValueError(f"missing normals sidecar {normals_path}")
        normals = sio.read_pointcloud(normals_path, "ascii-xyz")
        if len(normals) != len(pts):
            raise ValueError(f"{path}: {len(pts)} points but {len(normals)} normals")
        frames.append(
            LidarFrame(
                points=torch.tensor(pts, dtype=DTYPE),
                pose=pose,
                normals=torch.tensor(normals, dtype=DTYPE),
            )
        )
    return frames


def _cmd_fit_geom(args) -> int:
    cfg = sio.RunConfig.load(args.config)
    frames = _load_lidar_frames(cfg)
    field, history = fit_geometry(frames, cfg.geom)
    field.frozen_geometry = True
    field.save(args.out)
    if history:
        with open(Path(args.out).with_suffix(".history.csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=sorted(history[0].keys()))
            writer.writeheader()
            writer.writerows(history)
    print(f"fitted {len(field)} splats -> {args.out}")
    return 0


def _cmd_calibrate(args) -> int:
    cfg = sio.RunConfig.load(args.config)
    checkpoint = args.field or cfg.paths.get("checkpoint")
    if checkpoint is None:
        raise ValueError("no splat checkpoint: pass --field or set paths.checkpoint")
    field = SplatField.load(checkpoint)
    field.frozen_geometry = True
    poses = sio.read_poses(cfg.paths["poses"])
    image_paths = sorted(Path(cfg.paths["images"]).glob("*.ppm"))
    if len(image_paths) != len(poses):
        raise ValueError(f"{len(image_paths)} images but {len(poses)} poses")
    cam_frames = [
        CameraFrame(image=sio.read_ppm(p), lidar_index=i) for i, p in enumerate(image_paths)
    ]
    if "correspondences" in cfg.paths:
        corr = sio.read_correspondences(cfg.paths["correspondences"])
    else:
        corr = CorrespondenceSet.empty()
    if cfg.intr is None:
        raise ValueError("config must define intr.* for calibration")
    if args.seed is not None:
        from dataclasses import replace

        cfg.calib = replace(cfg.calib, seed=args.seed)

    result = calibrate(field, cam_frames, poses, corr, cfg.intr, cfg.calib, cfg.xi_init)
    out = Path(args.out or cfg.paths.get("output", "calib_out"))
    out.mkdir(parents=True, exist_ok=True)
    xi = result.estimate.xi.detach()
    sio.write_extrinsic(out / "est.pose", xi, se3_exp(xi))
    with open(out / "history.csv", "w", newline="") as fh:
        keys = sorted({k for rec in result.history for k in rec if k != "xi"})
        writer = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(result.history)
    with open(out / "events.log", "w") as fh:
        for it, event in result.events:
            fh.write(f"{it} {event}\n")
    lines = ["final xi (rho, phi): " + " ".join(f"{float(v):.8f}" for v in xi)]
    if cfg.xi_gt is not None:
        rot, trans = pose_error(se3_exp(xi), se3_exp(cfg.xi_gt))
        lines.append(f"error vs ground truth: {rot:.4f} deg, {trans * 100:.3f} cm")
    report = "\n".join(lines)
    (out / "report.txt").write_text(report + "\n")
    print(report)
    print(f"report written to {out}")
    return 0


def _cmd_evaluate(args) -> int:
    xi_est = sio.read_extrinsic(args.est)
    xi_gt = sio.read_extrinsic(args.gt)
    rot, trans = pose_error(se3_exp(xi_est), se3_exp(xi_gt))
    print(f"{rot:.3f} deg / {trans * 100:.2f} cm")
    return 0


def _normalize_map(values: torch.Tensor) -> torch.Tensor:
    hi = float(values.max())
    scaled = values / hi if hi > 0 else values
    return scaled.unsqueeze(-1).expand(*values.shape, 3)


def _cmd_render(args) -> int:
    from .experiment import overlay_image
    from .render import render_view

    cfg = sio.RunConfig.load(args.config)
    if cfg.intr is None:
        raise ValueError("config must define intr.* for rendering")
    field = SplatField.load(args.field)
    poses = sio.read_poses(cfg.paths["poses"])
    if not 0 <= args.frame < len(poses):
        raise ValueError(f"frame {args.frame} out of range 0..{len(poses) - 1}")
    xi = sio.read_extrinsic(args.extrinsic) if args.extrinsic else cfg.xi_init
    cam_pose = se3_exp(xi) @ poses[args.frame]
    maps = render_view(field, cfg.intr, cam_pose)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sio.write_ppm(out / f"color_{args.frame:03d}.ppm", maps["color"].clamp(0, 1))
    sio.write_ppm(out / f"depth_{args.frame:03d}.ppm", _normalize_map(maps["depth"]))
    sio.write_ppm(out / f"error_{args.frame:03d}.ppm", _normalize_map(maps["error"]))
    image_paths = sorted(Path(cfg.paths["images"]).glob("*.ppm")) if "images" in cfg.paths else []
    if image_paths:
        image = sio.read_ppm(image_paths[args.frame])
        sio.write_ppm(
            out / f"overlay_{args.frame:03d}.ppm", overlay_image(field, cfg.intr, cam_pose, image)
        )
    print(f"renders written to {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    results = run_gradcheck(seed=args.seed, fixtures_per_loss=args.fixtures)
    worst = 0.0
    for name, err in results.items():
        print(f"{name:14s} max rel err {err:.3e}")
        worst = max(worst, err)
    print(f"tolerance {GRADCHECK_TOL:.0e}: {'PASS' if worst < GRADCHECK_TOL else 'FAIL'}")
    return 0 if worst < GRADCHECK_TOL else 1


def _parse_bias_grid(text: str) -> list[tuple[float, ...]]:
    grid = []
    for chunk in text.split(";"):
        vals = tuple(float(v) for v in chunk.replace(",", " ").split())
        if len(vals) != 6:
            raise ValueError(f"bias {chunk!r}: expected 6 values")
        grid.append(vals)
    return grid


def _cmd_sweep(args) -> int:
    from dataclasses import replace as dc_replace

    from .experiment import desk_calib_config, desk_geom_config, run_experiment, summarize

    grid = _parse_bias_grid(args.biases)
    spec = {"preset": args.preset}
    kwargs = {}
    if args.frames is not None:
        kwargs["n_frames"] = args.frames
    if args.geom_iters is not None:
        kwargs["geom_cfg"] = dc_replace(desk_geom_config(), iters=args.geom_iters)
    if args.calib_iters is not None:
        kwargs["calib_cfg"] = desk_calib_config(iters=args.calib_iters)
    outcomes = run_experiment(
        scene_spec=spec,
        bias_grid=grid,
        output_dir=args.out,
        seeds=list(range(args.seeds)),
        write_overlays=args.overlays,
        **kwargs,
    )
    by_bias: dict[tuple, list] = {}
    for o in outcomes:
        by_bias.setdefault(o.bias, []).append(o)
    for bias, outs in by_bias.items():
        s = summarize(outs)
        print(
            f"bias {bias}: {s['n_success']}/{s['n']} success, "
            f"mean {s['mean_rot_deg']:.3f} deg / {s['mean_trans_m'] * 100:.2f} cm"
        )
    print(f"sweep report written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatcalib",
        description="LiDAR-camera extrinsic calibration via differentiable splat rendering",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", default="corridor", choices=["corridor", "plane"])
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--texture-freq", type=float, default=None)
    p.add_argument("--lidar-sigma", type=float, default=0.0)
    p.add_argument("--correspondences-per-pair", type=int, default=64)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("fit-geom", help="fit splat geometry to LiDAR scans")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_fit_geom)

    p = sub.add_parser("calibrate", help="optimize the extrinsic against camera images")
    p.add_argument("--config", required=True)
    p.add_argument("--field", default=None, help="splat checkpoint (.spl)")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None, help="override calib seed")
    p.set_defaults(fn=_cmd_calibrate)

    p = sub.add_parser("evaluate", help="compare two extrinsic files")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("render", help="render color/depth/error maps from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--extrinsic", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_render)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fixtures", type=int, default=10)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("sweep", help="bias-grid recovery sweep")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", default="corridor", choices=["corridor", "plane"])
    p.add_argument(
        "--biases",
        default="0 0 0 0 0 0;0.1 0.1 0.1 0 0 0",
        help="semicolon-separated 6-float se(3) biases",
    )
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--geom-iters", type=int, default=None)
    p.add_argument("--calib-iters", type=int, default=None)
    p.add_argument("--overlays", action="store_true")
    p.set_defaults(fn=_cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (
        ValueError,
        OSError,
        GeometryError,
        SplatFormatError,
        sio.FileFormatError,
        sio.FileParseError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
