"""Linear shape model, rigid posing, and per-frame training records."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .camera import Intrinsics, RigidPose, shift_principal_point


@dataclass(frozen=True)
class ShapeBasis:
    mean: np.ndarray        # (3E,)
    id_basis: np.ndarray    # (3E, n_id)
    exp_basis: np.ndarray   # (3E, n_exp)

    def __post_init__(self):
        n = self.mean.shape[0]
        if self.mean.ndim != 1 or n % 3:
            raise ValueError("mean must be a flat 3E vector")
        for name in ("id_basis", "exp_basis"):
            b = getattr(self, name)
            if b.ndim != 2 or b.shape[0] != n:
                raise ValueError(f"{name} must have {n} rows, got {b.shape}")

    @property
    def n_vertices(self) -> int:
        return self.mean.shape[0] // 3

    @property
    def n_id(self) -> int:
        return self.id_basis.shape[1]

    @property
    def n_exp(self) -> int:
        return self.exp_basis.shape[1]


def fibonacci_sphere(n: int) -> np.ndarray:
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def bump_anchors(n_exp: int) -> np.ndarray:
    """Unit directions on the camera-facing (-z) hemisphere, one per expression."""
    ang = 2 * np.pi * np.arange(n_exp) / max(n_exp, 1)
    tilt = 0.6
    d = np.stack([np.sin(tilt) * np.cos(ang), np.sin(tilt) * np.sin(ang), -np.cos(tilt) * np.ones(n_exp)], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def make_synthetic_basis(semi_axes=(0.5, 0.6, 0.5), n_vertices: int = 400, n_id: int = 3, n_exp: int = 4,
                         bump_width: float = 0.35, bump_gain: float = 0.08) -> ShapeBasis:
    """Ellipsoid mean shape with smooth bump expression modes.

    Identity columns stretch the ellipsoid along x, y, z. Expression column
    ``k`` pushes vertices outward along the surface normal with a Gaussian
    falloff around anchor direction ``k`` (see :func:`bump_anchors`).
    """
    if n_vertices > 500:
        raise ValueError("keep the synthetic mesh at 500 vertices or fewer")
    a = np.asarray(semi_axes, dtype=np.float64)
    unit = fibonacci_sphere(n_vertices)
    verts = unit * a
    normals = unit / a
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    id_cols = []
    for k in range(n_id):
        d = np.zeros_like(verts)
        d[:, k % 3] = verts[:, k % 3] * (0.1 if k < 3 else 0.05)
        id_cols.append(d.ravel())
    anchors = bump_anchors(n_exp)
    exp_cols = []
    for k in range(n_exp):
        w = np.exp(-np.sum((unit - anchors[k]) ** 2, axis=1) / (2 * bump_width ** 2))
        exp_cols.append((bump_gain * w[:, None] * normals).ravel())
    n = verts.size
    return ShapeBasis(verts.ravel(),
                      np.stack(id_cols, axis=1) if id_cols else np.zeros((n, 0)),
                      np.stack(exp_cols, axis=1) if exp_cols else np.zeros((n, 0)))


def blend_shape(basis: ShapeBasis, alpha, beta) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if alpha.shape != (basis.n_id,) or beta.shape != (basis.n_exp,):
        raise ValueError(f"expected alpha ({basis.n_id},) and beta ({basis.n_exp},), "
                         f"got {alpha.shape} and {beta.shape}")
    return basis.mean + basis.id_basis @ alpha + basis.exp_basis @ beta


def pose_shape(vertices, pose: RigidPose) -> np.ndarray:
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    return (v @ pose.R.T + pose.T).ravel()


def sample_crop(rng, extent: int = 736, window: int = 512) -> tuple[int, int]:
    """Uniform integer window offsets in ``[0, extent - window]``.

    ``rng`` is a seed or a ``numpy.random.Generator``; passing the same
    generator repeatedly walks one reproducible sequence.
    """
    if window > extent:
        raise ValueError(f"window {window} larger than extent {extent}")
    rng = np.random.default_rng(rng)
    ox, oy = rng.integers(0, extent - window + 1, size=2)
    return int(ox), int(oy)


@dataclass(frozen=True)
class FrameRecord:
    frame: int
    beta: np.ndarray
    gamma_index: int
    pose: RigidPose
    crop: tuple[int, int]
    image: str = ""
    mask: str = ""
    split: str = "train"
    max_offset: int = 224

    def __post_init__(self):
        ox, oy = self.crop
        if not (0 <= ox <= self.max_offset and 0 <= oy <= self.max_offset):
            raise ValueError(f"crop offset {self.crop} outside [0, {self.max_offset}]^2")
        if int(ox) != ox or int(oy) != oy:
            raise ValueError("crop offsets must be integers")
        object.__setattr__(self, "beta", np.array(self.beta, dtype=np.float64))
        if not np.all(np.isfinite(self.beta)):
            raise ValueError("non-finite expression coefficients")


def augment_record(rec: FrameRecord, ox: int, oy: int) -> FrameRecord:
    return replace(rec, crop=(int(ox), int(oy)))


def record_intrinsics(intr: Intrinsics, rec: FrameRecord) -> Intrinsics:
    """Window camera for a record; the centred crop leaves ``intr`` unchanged."""
    margin = rec.max_offset // 2
    return shift_principal_point(intr, rec.crop[0] - margin, rec.crop[1] - margin)
