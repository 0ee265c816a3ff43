"""Tests for file formats, configuration parsing, and the CLI surface."""

import numpy as np
import pytest
import torch

from splatcalib import io as sio
from splatcalib.calib import CorrespondenceSet
from splatcalib.cli import main as cli_main
from splatcalib.geometry import DTYPE, se3_exp
from splatcalib.splats import Splat2D, SplatField


class TestPointClouds:
    def test_single_record(self, tmp_path):
        path = tmp_path / "one.bin"
        path.write_bytes(np.array([1.0, 2.0, 3.0, 0.5], dtype="<f4").tobytes())
        pts = sio.read_pointcloud(path, "kitti-bin")
        assert pts.shape == (1, 3)
        assert np.array_equal(pts[0], [1.0, 2.0, 3.0])

    def test_empty_file_empty_cloud(self, tmp_path):
        path = tmp_path / "empty.bin"
        path.write_bytes(b"")
        assert sio.read_pointcloud(path, "kitti-bin").shape == (0, 3)

    def test_bad_byte_count(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x00" * 20)
        with pytest.raises(sio.FileFormatError):
            sio.read_pointcloud(path, "kitti-bin")

    def test_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(100000, 4)).astype(np.float32)
        path = tmp_path / "cloud.bin"
        sio.write_pointcloud(path, pts, "kitti-bin")
        first = path.read_bytes()
        back = sio.read_pointcloud(path, "kitti-bin", with_reflectance=True)
        sio.write_pointcloud(path, back, "kitti-bin")
        assert path.read_bytes() == first

    def test_ascii_parse_error_carries_line(self, tmp_path):
        path = tmp_path / "bad.xyz"
        path.write_text("1 2 3\n4 five 6\n")
        with pytest.raises(sio.FileParseError, match=":2"):
            sio.read_pointcloud(path, "ascii-xyz")

    def test_ascii_roundtrip(self, tmp_path):
        pts = np.random.default_rng(1).normal(size=(50, 3))
        path = tmp_path / "a.xyz"
        sio.write_pointcloud(path, pts, "ascii-xyz")
        assert np.array_equal(sio.read_pointcloud(path, "ascii-xyz"), pts)


class TestPoses:
    def test_identity_line(self, tmp_path):
        path = tmp_path / "p.txt"
        path.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n")
        poses = sio.read_poses(path)
        assert len(poses) == 1
        assert float((poses[0] - torch.eye(4, dtype=DTYPE)).abs().max()) == 0.0

    def test_order_and_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        poses = [se3_exp(torch.tensor(rng.normal(scale=0.6, size=6), dtype=DTYPE)) for _ in range(30)]
        path = tmp_path / "p.txt"
        sio.write_poses(path, poses)
        back = sio.read_poses(path)
        assert len(back) == 30
        worst = max(float((a - b).abs().max()) for a, b in zip(poses, back))
        assert worst < 1e-12

    def test_wrong_token_count(self, tmp_path):
        path = tmp_path / "p.txt"
        path.write_text("1 0 0 0 0 1 0 0 0 0 1\n")
        with pytest.raises(sio.FileParseError, match=":1"):
            sio.read_poses(path)

    def test_left_handed_rejected(self, tmp_path):
        path = tmp_path / "p.txt"
        path.write_text("-1 0 0 0 0 1 0 0 0 0 1 0\n")
        with pytest.raises(sio.FileFormatError):
            sio.read_poses(path)

    def test_non_orthonormal_rejected(self, tmp_path):
        path = tmp_path / "p.txt"
        path.write_text("1.01 0 0 0 0 1 0 0 0 0 1 0\n")
        with pytest.raises(sio.FileFormatError):
            sio.read_poses(path)


class TestImages:
    def test_single_red_pixel(self, tmp_path):
        path = tmp_path / "r.ppm"
        path.write_bytes(b"P6\n1 1\n255\n\xff\x00\x00")
        img = sio.read_ppm(path)
        assert img.shape == (1, 1, 3)
        assert torch.equal(img[0, 0], torch.tensor([1.0, 0.0, 0.0], dtype=DTYPE))

    def test_quantized_roundtrip_exact(self, tmp_path):
        img = torch.rand(24, 32, 3, dtype=DTYPE)
        path = tmp_path / "i.ppm"
        sio.write_ppm(path, img)
        once = sio.read_ppm(path)
        sio.write_ppm(path, once)
        assert torch.equal(sio.read_ppm(path), once)

    def test_comment_in_header(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# a comment\n1 1\n255\n\x00\xff\x00")
        img = sio.read_ppm(path)
        assert torch.equal(img[0, 0], torch.tensor([0.0, 1.0, 0.0], dtype=DTYPE))

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P5\n1 1\n255\n\x00")
        with pytest.raises(sio.FileFormatError):
            sio.read_ppm(path)

    def test_truncated_pixels(self, tmp_path):
        path = tmp_path / "short.ppm"
        path.write_bytes(b"P6\n2 2\n255\n\x00\x00\x00")
        with pytest.raises(sio.FileFormatError):
            sio.read_ppm(path)


class TestExtrinsicFiles:
    def test_roundtrip_with_matrix_echo(self, tmp_path):
        xi = torch.tensor([0.1, -0.2, 0.3, 0.01, 0.02, -0.03], dtype=DTYPE)
        path = tmp_path / "e.pose"
        sio.write_extrinsic(path, xi, se3_exp(xi))
        assert torch.equal(sio.read_extrinsic(path), xi)
        assert len(path.read_text().strip().splitlines()) == 2

    def test_six_floats_required(self, tmp_path):
        path = tmp_path / "e.pose"
        path.write_text("1 2 3 4 5\n")
        with pytest.raises(sio.FileParseError):
            sio.read_extrinsic(path)


class TestCorrespondenceFiles:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        corr = CorrespondenceSet(
            frame_a=np.array([0, 0, 1, 2]),
            frame_b=np.array([1, 1, 2, 3]),
            uv_a=rng.uniform(0, 64, (4, 2)),
            uv_b=rng.uniform(0, 64, (4, 2)),
        )
        path = tmp_path / "c.txt"
        sio.write_correspondences(path, corr)
        back = sio.read_correspondences(path)
        assert np.array_equal(back.frame_a, corr.frame_a)
        assert np.array_equal(back.uv_a, corr.uv_a)
        assert np.array_equal(back.uv_b, corr.uv_b)

    def test_non_consecutive_rejected(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("0 2 1.0 1.0 2.0 2.0\n")
        with pytest.raises(sio.FileFormatError):
            sio.read_correspondences(path)


class TestSplatCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        splats = []
        for _ in range(17):
            n = rng.normal(size=3)
            splats.append(
                Splat2D(
                    center=rng.normal(size=3),
                    normal=n / np.linalg.norm(n),
                    scale_u=rng.uniform(0.1, 1),
                    scale_v=rng.uniform(0.1, 1),
                    opacity=rng.uniform(0.05, 0.95),
                    color=tuple(rng.uniform(0, 1, 3)),
                    uncertainty=rng.uniform(0.01, 0.5),
                )
            )
        field = SplatField.from_splats(splats)
        path = tmp_path / "f.spl"
        field.save(path)
        first = path.read_bytes()
        SplatField.load(path).save(path)
        assert path.read_bytes() == first


class TestConfig:
    def test_parse_reject_unknown_and_coerce(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            "seed = 9\n"
            "intr.width = 64\nintr.height = 48\nintr.fx = 40\nintr.fy = 40\n"
            "intr.cx = 32\nintr.cy = 24\n"
            "geom.iters = 321  # inline comment\n"
            "calib.lambda_t = 2.5\n"
            "calib.stride_schedule = 4 2 1\n"
            "xi_gt = 0.05 -0.06 0.1 0.02 -0.03 0.04\n"
        )
        rc = sio.RunConfig.load(cfg)
        assert rc.seed == 9
        assert rc.geom.iters == 321
        assert rc.calib.lambda_t == 2.5
        assert rc.calib.stride_schedule == (4, 2, 1)
        assert rc.intr.width == 64
        assert float(rc.xi_gt[2]) == 0.1

        cfg.write_text("geom.itres = 5\n")
        with pytest.raises(sio.FileFormatError, match="itres"):
            sio.RunConfig.load(cfg)

    def test_missing_path_rejected(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("paths.poses = nowhere.txt\n")
        with pytest.raises(sio.FileFormatError, match="does not exist"):
            sio.RunConfig.load(cfg)

    def test_duplicate_key_rejected(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("seed = 1\nseed = 2\n")
        with pytest.raises(sio.FileParseError):
            sio.RunConfig.load(cfg)


class TestCli:
    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli_main(["frobnicate"])
        assert exc.value.code == 2

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli_main(["evaluate", "--est", "a", "--gt", "b", "--bogus"])
        assert exc.value.code == 2

    def test_evaluate_identical_files(self, tmp_path, capsys):
        xi = torch.tensor([0.05, -0.06, 0.1, 0.02, -0.03, 0.04], dtype=DTYPE)
        path = tmp_path / "e.pose"
        sio.write_extrinsic(path, xi)
        code = cli_main(["evaluate", "--est", str(path), "--gt", str(path)])
        out = capsys.readouterr().out
        assert code == 0
        assert "0.000 deg / 0.00 cm" in out

    def test_evaluate_missing_file_exits_1(self, capsys):
        code = cli_main(["evaluate", "--est", "/nonexistent.pose", "--gt", "/nonexistent.pose"])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_synth_render_pipeline(self, tmp_path, capsys):
        out = tmp_path / "ds"
        assert cli_main(["synth", "--out", str(out), "--frames", "3", "--seed", "2"]) == 0
        assert (out / "poses.txt").exists()
        assert (out / "images" / "002.ppm").exists()
        assert (out / "clouds" / "000.bin").exists()
        assert (out / "run.cfg").exists()
        # render straight from a tiny hand-made field
        field = SplatField.from_splats(
            [Splat2D(center=np.array([0.0, 0.0, 5.0]), scale_u=3.0, scale_v=3.0, opacity=0.9)]
        )
        ckpt = tmp_path / "f.spl"
        field.save(ckpt)
        rdir = tmp_path / "render"
        code = cli_main(
            [
                "render",
                "--config",
                str(out / "run.cfg"),
                "--field",
                str(ckpt),
                "--frame",
                "1",
                "--out",
                str(rdir),
            ]
        )
        assert code == 0
        for kind in ("color", "depth", "error", "overlay"):
            assert (rdir / f"{kind}_001.ppm").exists()
