"""File formats: point clouds, poses, images, extrinsics, configs.

Everything here is deliberately plain: little-endian binary for clouds and
splats, whitespace text for poses/extrinsics/correspondences, binary PPM
(P6) for images, and a flat ``key = value`` config syntax with dotted
prefixes for grouping.  Each format round-trips exactly per its contract.
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, field as dc_field, fields as dc_fields
from pathlib import Path

import numpy as np
import torch

from .calib import CalibConfig, CorrespondenceSet
from .geom_fit import GeomFitConfig
from .geometry import DTYPE, GeometryError, Intrinsics, make_pose, reorthonormalize

POINTCLOUD_FORMATS = ("kitti-bin", "ascii-xyz")
ORTHONORMALITY_TOL = 1e-4


class FileFormatError(ValueError):
    """Structurally invalid file (bad magic, bad byte count, bad values)."""


class FileParseError(ValueError):
    """Unreadable token; message carries the 1-based line number."""


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------


def read_pointcloud(path, fmt: str = "kitti-bin", with_reflectance: bool = False) -> np.ndarray:
    """Load points as (N, 3) float64 (or (N, 4) with reflectance kept).

    ``kitti-bin``: packed little-endian float32 (x, y, z, reflectance)
    records.  ``ascii-xyz``: one ``x y z`` per line.  An empty file yields
    an empty cloud; the caller decides whether that is fatal.
    """
    path = Path(path)
    if fmt == "kitti-bin":
        buf = path.read_bytes()
        if len(buf) % 16 != 0:
            raise FileFormatError(
                f"{path}: kitti-bin length {len(buf)} is not a multiple of 16 bytes"
            )
        pts = np.frombuffer(buf, dtype="<f4").reshape(-1, 4).astype(np.float64)
        return pts if with_reflectance else pts[:, :3]
    if fmt == "ascii-xyz":
        rows = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                tokens = line.split()
                if len(tokens) != 3:
                    raise FileParseError(f"{path}:{lineno}: expected 3 values, got {len(tokens)}")
                try:
                    rows.append([float(t) for t in tokens])
                except ValueError as exc:
                    raise FileParseError(f"{path}:{lineno}: {exc}") from exc
        return np.asarray(rows, dtype=np.float64).reshape(-1, 3)
    raise ValueError(f"unknown point cloud format {fmt!r}; options: {POINTCLOUD_FORMATS}")


def write_pointcloud(path, points: np.ndarray, fmt: str = "kitti-bin") -> None:
    """Inverse of :func:`read_pointcloud`.

    ``points`` is (N, 3) or (N, 4); kitti-bin pads missing reflectance with
    zero and stores float32, so write-then-read is bit-exact for float32
    inputs.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, points.shape[-1])
    if points.ndim != 2 or points.shape[1] not in (3, 4):
        raise ValueError(f"points must be (N, 3) or (N, 4), got {points.shape}")
    path = Path(path)
    if fmt == "kitti-bin":
        out = np.zeros((points.shape[0], 4), dtype="<f4")
        out[:, : points.shape[1]] = points.astype("<f4")
        path.write_bytes(out.tobytes())
        return
    if fmt == "ascii-xyz":
        with open(path, "w") as fh:
            for p in points[:, :3]:
                fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        return
    raise ValueError(f"unknown point cloud format {fmt!r}; options: {POINTCLOUD_FORMATS}")


# ---------------------------------------------------------------------------
# pose lists (12-float row-major 3x4 [R|t] per line)
# ---------------------------------------------------------------------------


def read_poses(path) -> list[torch.Tensor]:
    """Load 4x4 poses from 12-float lines, validating and polishing R.

    Rotations must be orthonormal to within ORTHONORMALITY_TOL (Frobenius)
    and right-handed; accepted rotations are polar-projected onto SO(3) so
    downstream composition starts clean.
    """
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) != 12:
                raise FileParseError(f"{path}:{lineno}: expected 12 values, got {len(tokens)}")
            try:
                vals = torch.tensor([float(t) for t in tokens], dtype=DTYPE)
            except ValueError as exc:
                raise FileParseError(f"{path}:{lineno}: {exc}") from exc
            mat = vals.reshape(3, 4)
            rot = mat[:, :3]
            if float(torch.linalg.det(rot)) < 0:
                raise FileFormatError(f"{path}:{lineno}: rotation is left-handed (det < 0)")
            drift = float(torch.linalg.norm(rot @ rot.T - torch.eye(3, dtype=DTYPE)))
            if drift > ORTHONORMALITY_TOL:
                raise FileFormatError(
                    f"{path}:{lineno}: rotation drifts from orthonormal by {drift:.2e}"
                )
            poses.append(make_pose(reorthonormalize(rot), mat[:, 3]))
    return poses


def write_poses(path, poses: list[torch.Tensor]) -> None:
    with open(path, "w") as fh:
        for pose in poses:
            row = pose[:3, :4].reshape(-1).tolist()
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


# ---------------------------------------------------------------------------
# images (binary PPM, P6 maxval 255)
# ---------------------------------------------------------------------------


def _read_ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """First ``count`` header tokens and the offset one byte past the last.

    PPM headers are whitespace-separated with ``#`` comments running to end
    of line; exactly one whitespace byte separates the last token from the
    pixel data.
    """
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        if i >= len(buf):
            raise FileFormatError("truncated PPM header")
        c = buf[i : i + 1]
        if c == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(buf) and not buf[j : j + 1].isspace() and buf[j : j + 1] != b"#":
                j += 1
            tokens.append(buf[i:j])
            i = j
    if i >= len(buf) or not buf[i : i + 1].isspace():
        raise FileFormatError("PPM header not terminated by whitespace")
    return tokens, i + 1


def read_ppm(path) -> torch.Tensor:
    """Load a binary P6 PPM as (H, W, 3) values in [0, 1] (v / 255)."""
    buf = Path(path).read_bytes()
    tokens, offset = _read_ppm_tokens(buf, 4)
    if tokens[0] != b"P6":
        raise FileFormatError(f"{path}: expected P6 magic, got {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FileFormatError(f"{path}: non-integer PPM header field") from exc
    if maxval != 255:
        raise FileFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    if width <= 0 or height <= 0:
        raise FileFormatError(f"{path}: bad dimensions {width}x{height}")
    expected = width * height * 3
    data = buf[offset : offset + expected]
    if len(data) != expected:
        raise FileFormatError(f"{path}: expected {expected} pixel bytes, got {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3)
    return torch.from_numpy(arr.astype(np.float64) / 255.0)


def write_ppm(path, image: torch.Tensor) -> None:
    """Write (H, W, 3) values in [0, 1] as P6, quantizing by round(v * 255)."""
    arr = np.asarray(image.detach().cpu().numpy() if torch.is_tensor(image) else image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {arr.shape}")
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(q.tobytes())


# ---------------------------------------------------------------------------
# extrinsic files
# ---------------------------------------------------------------------------


def read_extrinsic(path) -> torch.Tensor:
    """Six floats (rho, phi) from the first non-comment line.

    A second 12-float [R|t] line, if present, is informational only and
    ignored on read.
    """
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) != 6:
                raise FileParseError(f"{path}:{lineno}: expected 6 values, got {len(tokens)}")
            try:
                return torch.tensor([float(t) for t in tokens], dtype=DTYPE)
            except ValueError as exc:
                raise FileParseError(f"{path}:{lineno}: {exc}") from exc
    raise FileFormatError(f"{path}: no extrinsic line found")


def write_extrinsic(path, xi: torch.Tensor, pose: torch.Tensor | None = None) -> None:
    """Write the authoritative 6-float line, plus an optional 3x4 echo."""
    xi = torch.as_tensor(xi, dtype=DTYPE).reshape(6)
    with open(path, "w") as fh:
        fh.write(" ".join(f"{float(v):.17g}" for v in xi) + "\n")
        if pose is not None:
            row = pose[:3, :4].reshape(-1).tolist()
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


# ---------------------------------------------------------------------------
# correspondence files: one match per line, "n n+1 x1 y1 x2 y2"
# ---------------------------------------------------------------------------


def read_correspondences(path) -> CorrespondenceSet:
    fa, fb, ua, ub = [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) != 6:
                raise FileParseError(f"{path}:{lineno}: expected 6 values, got {len(tokens)}")
            try:
                a, b = int(tokens[0]), int(tokens[1])
                vals = [float(t) for t in tokens[2:]]
            except ValueError as exc:
                raise FileParseError(f"{path}:{lineno}: {exc}") from exc
            if b != a + 1:
                raise FileFormatError(
                    f"{path}:{lineno}: matches must link consecutive frames, got {a}->{b}"
                )
            fa.append(a)
            fb.append(b)
            ua.append(vals[0:2])
            ub.append(vals[2:4])
    return CorrespondenceSet(
        frame_a=np.asarray(fa, dtype=np.int64),
        frame_b=np.asarray(fb, dtype=np.int64),
        uv_a=np.asarray(ua, dtype=np.float64).reshape(-1, 2),
        uv_b=np.asarray(ub, dtype=np.float64).reshape(-1, 2),
    )


def write_correspondences(path, corr: CorrespondenceSet) -> None:
    with open(path, "w") as fh:
        for a, b, ua, ub in zip(corr.frame_a, corr.frame_b, corr.uv_a, corr.uv_b):
            fh.write(f"{int(a)} {int(b)} {ua[0]:.17g} {ua[1]:.17g} {ub[0]:.17g} {ub[1]:.17g}\n")


# ---------------------------------------------------------------------------
# flat key = value configuration
# ---------------------------------------------------------------------------


def parse_flat_config(path) -> dict[str, str]:
    """Read ``key = value`` lines into a dict; ``#`` starts a comment."""
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise FileParseError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in stripped.split("=", 1))
            if not key or not value:
                raise FileParseError(f"{path}:{lineno}: empty key or value")
            if key in out:
                raise FileParseError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value
    return out


def _coerce(value: str, target_type, key: str):
    try:
        if target_type is bool:
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if target_type is int:
            return int(value)
        if target_type is float:
            return float(value)
        if target_type is str:
            return value
        # tuple-typed fields: whitespace or comma separated numbers
        if getattr(target_type, "__origin__", None) is tuple:
            parts = value.replace(",", " ").split()
            elem = target_type.__args__[0]
            return tuple(elem(p) for p in parts)
    except ValueError as exc:
        raise FileFormatError(f"config key {key!r}: {exc}") from exc
    raise FileFormatError(f"config key {key!r}: unsupported type {target_type}")


def _fill_dataclass(cls, prefix: str, flat: dict[str, str], used: set[str]):
    kwargs = {}
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dc_fields(cls)}
    for key, value in flat.items():
        if not key.startswith(prefix + "."):
            continue
        name = key[len(prefix) + 1 :]
        if name not in names:
            raise FileFormatError(f"unknown config key {key!r}")
        kwargs[name] = _coerce(value, hints[name], key)
        used.add(key)
    return cls(**kwargs)


@dataclass
class RunConfig:
    """Everything a full pipeline invocation needs, loadable from one file.

    Dotted prefixes group keys: ``paths.*`` (inputs/outputs), ``intr.*``
    (camera model), ``geom.*`` (geometry stage), ``calib.*`` (calibration
    stage), and top-level ``seed`` / ``xi_init`` / ``xi_gt``.  Unknown keys
    are rejected so typos fail loudly.
    """

    paths: dict[str, str] = dc_field(default_factory=dict)
    intr: Intrinsics | None = None
    geom: GeomFitConfig = dc_field(default_factory=GeomFitConfig)
    calib: CalibConfig = dc_field(default_factory=CalibConfig)
    xi_init: torch.Tensor = dc_field(default_factory=lambda: torch.zeros(6, dtype=DTYPE))
    xi_gt: torch.Tensor | None = None
    seed: int = 0

    PATH_KEYS = ("clouds", "poses", "images", "correspondences", "output", "checkpoint")

    @classmethod
    def load(cls, path) -> "RunConfig":
        flat = parse_flat_config(path)
        used: set[str] = set()
        base = Path(path).parent

        paths: dict[str, str] = {}
        for key in list(flat):
            if key.startswith("paths."):
                name = key[len("paths.") :]
                if name not in cls.PATH_KEYS:
                    raise FileFormatError(f"unknown config key {key!r}")
                resolved = str((base / flat[key]).resolve())
                if name != "output" and not Path(resolved).exists():
                    raise FileFormatError(f"config path {key!r} does not exist: {resolved}")
                paths[name] = resolved
                used.add(key)

        intr = None
        intr_keys = {k for k in flat if k.startswith("intr.")}
        if intr_keys:
            vals = {}
            for key in intr_keys:
                name = key[len("intr.") :]
                if name not in ("fx", "fy", "cx", "cy", "width", "height"):
                    raise FileFormatError(f"unknown config key {key!r}")
                vals[name] = _coerce(flat[key], int if name in ("width", "height") else float, key)
                used.add(key)
            try:
                intr = Intrinsics(**vals)
            except (TypeError, GeometryError) as exc:
                raise FileFormatError(f"bad intrinsics: {exc}") from exc

        try:
            geom = _fill_dataclass(GeomFitConfig, "geom", flat, used)
            calib = _fill_dataclass(CalibConfig, "calib", flat, used)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, FileFormatError):
                raise
            raise FileFormatError(f"bad stage config: {exc}") from exc

        kwargs: dict = {"paths": paths, "intr": intr, "geom": geom, "calib": calib}
        for key in ("xi_init", "xi_gt"):
            if key in flat:
                parts = flat[key].replace(",", " ").split()
                if len(parts) != 6:
                    raise FileFormatError(f"config key {key!r}: expected 6 floats")
                kwargs[key] = torch.tensor([float(p) for p in parts], dtype=DTYPE)
                used.add(key)
        if "seed" in flat:
            kwargs["seed"] = _coerce(flat["seed"], int, "seed")
            used.add("seed")

        unknown = set(flat) - used
        if unknown:
            raise FileFormatError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs)
