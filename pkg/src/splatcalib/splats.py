"""2D Gaussian splat field: parameter storage, activations, serialization.

Raw (unconstrained) parameters per splat, 14 floats in file order:
position (3), tangent-frame quaternion wxyz (4), log scales (2),
opacity logit (1), color (3), raw depth-uncertainty (1).

Activations: scale = exp(raw), opacity = sigmoid(raw), uncertainty =
softplus(raw), colors clamped to [0, 1].  The tangent frame is the rotation
of the (normalized) quaternion: columns are tangent_u, tangent_v and the
splat normal.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from .geometry import DTYPE

MAGIC = b"SPL2"
VERSION = 1
FLOATS_PER_SPLAT = 14


class SplatFormatError(ValueError):
    pass


def quat_to_rotation(quats: torch.Tensor) -> torch.Tensor:
    """(N,4) wxyz quaternions -> (N,3,3) rotations; normalizes first."""
    q = quats / torch.linalg.norm(quats, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        dim=-2,
    )


def rotation_to_quat(rot: np.ndarray) -> np.ndarray:
    """Single 3x3 rotation -> wxyz quaternion (Shepperd's method)."""
    m = rot
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return np.asarray(q, dtype=np.float64)


def frame_from_normal(normal: np.ndarray) -> np.ndarray:
    """Orthonormal frame [l_u l_v n] (columns) with the given unit normal."""
    n = normal / np.linalg.norm(normal)
    helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    lu = np.cross(helper, n)
    lu /= np.linalg.norm(lu)
    lv = np.cross(n, lu)
    return np.stack([lu, lv, n], axis=1)


def inverse_sigmoid(x: float) -> float:
    return math.log(x / (1.0 - x))


def inverse_softplus(x: float) -> float:
    # softplus(y) = log(1 + e^y) = x  =>  y = log(e^x - 1)
    return math.log(math.expm1(x))


@dataclass
class Splat2D:
    """Convenience constructor for a single splat in activated units."""

    center: np.ndarray
    normal: np.ndarray = dc_field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))
    scale_u: float = 0.1
    scale_v: float = 0.1
    opacity: float = 0.5
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    uncertainty: float = 0.05

    def raw(self) -> np.ndarray:
        quat = rotation_to_quat(frame_from_normal(np.asarray(self.normal, dtype=np.float64)))
        return np.concatenate(
            [
                np.asarray(self.center, dtype=np.float64),
                quat,
                [math.log(self.scale_u), math.log(self.scale_v)],
                [inverse_sigmoid(self.opacity)],
                np.asarray(self.color, dtype=np.float64),
                [inverse_softplus(self.uncertainty)],
            ]
        )


class SplatField:
    """Ordered collection of 2D Gaussian splats as raw parameter tensors."""

    def __init__(
        self,
        positions: torch.Tensor,
        quats: torch.Tensor,
        log_scales: torch.Tensor,
        opacity_logits: torch.Tensor,
        colors: torch.Tensor,
        unc_raw: torch.Tensor,
        frozen_geometry: bool = False,
    ):
        n = positions.shape[0]
        for name, t, shape in [
            ("positions", positions, (n, 3)),
            ("quats", quats, (n, 4)),
            ("log_scales", log_scales, (n, 2)),
            ("opacity_logits", opacity_logits, (n,)),
            ("colors", colors, (n, 3)),
            ("unc_raw", unc_raw, (n,)),
        ]:
            if tuple(t.shape) != shape:
                raise SplatFormatError(f"{name}: expected shape {shape}, got {tuple(t.shape)}")
        self.positions = positions
        self.quats = quats
        self.log_scales = log_scales
        self.opacity_logits = opacity_logits
        self.colors = colors
        self.unc_raw = unc_raw
        self.frozen_geometry = frozen_geometry

    def __len__(self) -> int:
        return self.positions.shape[0]

    # -- derived (activated) quantities ----------------------------------

    def frames(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        rot = quat_to_rotation(self.quats)
        return rot[:, :, 0], rot[:, :, 1], rot[:, :, 2]

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    @property
    def rgb(self) -> torch.Tensor:
        return torch.clamp(self.colors, 0.0, 1.0)

    @property
    def uncertainties(self) -> torch.Tensor:
        return torch.nn.functional.softplus(self.unc_raw)

    # -- construction / editing ------------------------------------------

    @classmethod
    def from_raw(cls, raw: np.ndarray, frozen_geometry: bool = False) -> "SplatField":
        raw = np.asarray(raw, dtype=np.float64).reshape(-1, FLOATS_PER_SPLAT)
        t = torch.from_numpy(raw.copy())
        return cls(
            positions=t[:, 0:3].clone(),
            quats=t[:, 3:7].clone(),
            log_scales=t[:, 7:9].clone(),
            opacity_logits=t[:, 9].clone(),
            colors=t[:, 10:13].clone(),
            unc_raw=t[:, 13].clone(),
            frozen_geometry=frozen_geometry,
        )

    @classmethod
    def from_raw_tensor(cls, raw: torch.Tensor, frozen_geometry: bool = False) -> "SplatField":
        """Build a field whose tensors are views of ``raw`` (N, 14).

        Keeps the autograd graph through ``raw``; used by gradient checks.
        """
        return cls(
            positions=raw[:, 0:3],
            quats=raw[:, 3:7],
            log_scales=raw[:, 7:9],
            opacity_logits=raw[:, 9],
            colors=raw[:, 10:13],
            unc_raw=raw[:, 13],
            frozen_geometry=frozen_geometry,
        )

    @classmethod
    def from_splats(cls, splats: list[Splat2D], frozen_geometry: bool = False) -> "SplatField":
        raw = np.stack([s.raw() for s in splats])
        return cls.from_raw(raw, frozen_geometry=frozen_geometry)

    @classmethod
    def empty(cls) -> "SplatField":
        return cls.from_raw(np.zeros((0, FLOATS_PER_SPLAT)))

    def raw_matrix(self) -> np.ndarray:
        """(N, 14) float64 raw parameters in file order."""
        with torch.no_grad():
            return (
                torch.cat(
                    [
                        self.positions,
                        self.quats,
                        self.log_scales,
                        self.opacity_logits.unsqueeze(1),
                        self.colors,
                        self.unc_raw.unsqueeze(1),
                    ],
                    dim=1,
                )
                .cpu()
                .numpy()
                .copy()
            )

    def append_raw(self, raw: np.ndarray) -> None:
        """Append splats (raw 14-float rows); detaches existing tensors."""
        other = SplatField.from_raw(raw)
        with torch.no_grad():
            for name in ["positions", "quats", "log_scales", "opacity_logits", "colors", "unc_raw"]:
                merged = torch.cat([getattr(self, name).detach(), getattr(other, name)], dim=0)
                setattr(self, name, merged)

    def keep(self, mask: torch.Tensor) -> None:
        with torch.no_grad():
            for name in ["positions", "quats", "log_scales", "opacity_logits", "colors", "unc_raw"]:
                setattr(self, name, getattr(self, name).detach()[mask].clone())

    def permuted(self, perm: torch.Tensor) -> "SplatField":
        return SplatField(
            self.positions[perm].clone(),
            self.quats[perm].clone(),
            self.log_scales[perm].clone(),
            self.opacity_logits[perm].clone(),
            self.colors[perm].clone(),
            self.unc_raw[perm].clone(),
            frozen_geometry=self.frozen_geometry,
        )

    def clone(self) -> "SplatField":
        return SplatField.from_raw(self.raw_matrix(), frozen_geometry=self.frozen_geometry)

    def requires_grad_(self, geometry: bool = True, colors: bool = True) -> "SplatField":
        for t in [self.positions, self.quats, self.log_scales, self.opacity_logits, self.unc_raw]:
            t.requires_grad_(geometry)
        self.colors.requires_grad_(colors)
        return self

    # -- serialization ----------------------------------------------------

    def save(self, path) -> None:
        raw32 = self.raw_matrix().astype("<f4")
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<IQ", VERSION, len(self)))
            f.write(raw32.tobytes())

    @classmethod
    def load(cls, path) -> "SplatField":
        with open(path, "rb") as f:
            data = f.read()
        if data[:4] != MAGIC:
            raise SplatFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
        version, count = struct.unpack_from("<IQ", data, 4)
        if version != VERSION:
            raise SplatFormatError(f"unsupported version {version}")
        body = data[16:]
        expected = count * FLOATS_PER_SPLAT * 4
        if len(body) != expected:
            raise SplatFormatError(f"body has {len(body)} bytes, expected {expected}")
        raw = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(count, FLOATS_PER_SPLAT)
        return cls.from_raw(raw)
