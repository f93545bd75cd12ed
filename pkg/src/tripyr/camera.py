"""Pinhole camera, ray generation and the sliding-window algebra.

Conventions: the camera looks down +z, image x grows to the right and y
grows downward. Pixel centres sit at half-integer canvas coordinates.

A head pose ``P = (R, T)`` maps camera-space points to canonical space as
``R @ x + T``; the inverse ``R.T @ (x - T)`` takes canonical points back to
camera space.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_NEAR = 1.0
DEFAULT_FAR = 3.0

# scale tag -> (patches per side, stride in canvas pixels)
SCALES = {128: (1, 4), 256: (2, 2), 512: (4, 1)}


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"sensor size must be positive, got {self.width}x{self.height}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, K, width: int, height: int) -> "Intrinsics":
        K = np.asarray(K, dtype=np.float64)
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]), width, height)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RigidPose:
    """Rotation ``R`` (3x3) and translation ``T`` (3,)."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    T: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _frozen(self.R)
        T = _frozen(self.T)
        if R.shape != (3, 3) or T.shape != (3,):
            raise ValueError(f"bad pose shapes R{R.shape} T{T.shape}")
        if not np.allclose(R.T @ R, np.eye(3), rtol=0, atol=1e-9):
            raise ValueError("R is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("det(R) != 1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    def to_list(self) -> list[float]:
        """Twelve numbers: R row-major then T."""
        return [float(x) for x in self.R.ravel()] + [float(x) for x in self.T]

    @classmethod
    def from_list(cls, values) -> "RigidPose":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (12,):
            raise ValueError(f"pose needs 12 numbers, got {values.size}")
        return cls(values[:9].reshape(3, 3), values[9:])


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not (0 <= self.near < self.far):
            raise ValueError(f"need 0 <= near < far, got {self.near}, {self.far}")


@dataclass(frozen=True)
class PixelGrid:
    """One ``map_res x map_res`` sampling grid over the ``4 * map_res`` canvas.

    ``scale=128`` covers the whole canvas at stride 4, ``scale=256`` one
    quadrant at stride 2 and ``scale=512`` one of 16 patches at stride 1.
    ``origin`` is ``(x0, y0)`` in canvas pixels.
    """

    scale: int
    patch: int
    origin: tuple[int, int]
    side: int
    stride: int
    map_res: int = 128

    @classmethod
    def make(cls, scale: int, patch: int = 0, map_res: int = 128) -> "PixelGrid":
        if scale not in SCALES:
            raise ValueError(f"unknown scale {scale}")
        per_side, stride = SCALES[scale]
        if not 0 <= patch < per_side * per_side:
            raise ValueError(f"patch {patch} out of range for scale {scale}")
        side = map_res * stride
        row, col = divmod(patch, per_side)
        return cls(scale, patch, (col * side, row * side), side, stride, map_res)

    @property
    def canvas(self) -> int:
        return 4 * self.map_res

    def pixel_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Canvas coordinates ``(u, v)`` of every grid pixel, each ``(map_res, map_res)``."""
        idx = np.arange(self.map_res, dtype=np.float64)
        u = (self.origin[0] + self.stride * idx) + 0.5
        v = (self.origin[1] + self.stride * idx) + 0.5
        return np.broadcast_to(u[None, :], (self.map_res,) * 2), np.broadcast_to(v[:, None], (self.map_res,) * 2)

    def canvas_slice(self) -> tuple[slice, slice]:
        """Row/column slices selecting this grid's pixels from a full canvas image."""
        x0, y0 = self.origin
        return (slice(y0, y0 + self.side, self.stride), slice(x0, x0 + self.side, self.stride))


def all_grids(scale: int, map_res: int = 128) -> list[PixelGrid]:
    per_side, _ = SCALES[scale]
    return [PixelGrid.make(scale, p, map_res) for p in range(per_side * per_side)]


def pixel_rays(intr: Intrinsics, cam_pose: RigidPose, u, v) -> tuple[np.ndarray, np.ndarray]:
    """Unit ray directions and origins for canvas coordinates ``u``, ``v``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = (u - intr.cx) / intr.fx
    y = (v - intr.cy) / intr.fy
    n = np.sqrt(x * x + y * y + 1.0)
    x, y, z = x / n, y / n, 1.0 / n
    # elementwise rotation keeps every ray bitwise independent of batch shape
    R = cam_pose.R
    d = np.stack([R[i, 0] * x + R[i, 1] * y + R[i, 2] * z for i in range(3)], axis=-1)
    o = np.broadcast_to(cam_pose.T, d.shape).copy()
    return o, d


def grid_rays(intr: Intrinsics, cam_pose: RigidPose, grid: PixelGrid) -> tuple[np.ndarray, np.ndarray]:
    u, v = grid.pixel_coords()
    return pixel_rays(intr, cam_pose, u, v)


def ray_for_pixel(intr: Intrinsics, cam_pose: RigidPose, grid: PixelGrid, i: int, j: int,
                  near: float = DEFAULT_NEAR, far: float = DEFAULT_FAR) -> Ray:
    if not (0 <= i < grid.map_res and 0 <= j < grid.map_res):
        raise IndexError(f"pixel ({i}, {j}) outside {grid.map_res}x{grid.map_res} grid")
    u = (grid.origin[0] + grid.stride * j) + 0.5
    v = (grid.origin[1] + grid.stride * i) + 0.5
    o, d = pixel_rays(intr, cam_pose, u, v)
    return Ray(o, d, near, far)


def canonical_to_camera(p: RigidPose, point) -> np.ndarray:
    point = np.asarray(point, dtype=np.float64)
    # R^-1 (x - T) with R^-1 = R^T, written for row vectors
    return (point - p.T) @ p.R


def camera_to_canonical(p: RigidPose, point) -> np.ndarray:
    point = np.asarray(point, dtype=np.float64)
    return point @ p.R.T + p.T


def camera_to_world_affine(K, extr, point) -> np.ndarray:
    """``K @ point + extr``: the intrinsics-times-point map with an offset.

    Kept out of the render path; it exists to derive the window algebra.
    """
    return np.asarray(K, dtype=np.float64) @ np.asarray(point, dtype=np.float64) + np.asarray(extr, dtype=np.float64)


def window_shift_to_translation(intr: Intrinsics, R, dx: float, dy: float) -> tuple[float, float]:
    """Depth-free pose translation for a window shift of ``(dx, dy)`` pixels.

    Lifts the shift to ``(dx, dy, 0)`` and returns the first two entries of
    ``R @ inv(K) @ (dx, dy, 0)``.
    """
    lifted = np.array([dx, dy, 0.0])
    out = np.asarray(R, dtype=np.float64) @ np.linalg.solve(intr.matrix, lifted)
    return float(out[0]), float(out[1])


def window_shift_to_translation_metric(intr: Intrinsics, R, depth: float, dx: float, dy: float) -> tuple[float, float]:
    """As :func:`window_shift_to_translation`, scaled by scene depth.

    Adding the result to ``T`` moves content at ``depth`` by ``-(dx, dy)``
    pixels, i.e. what a window slid by ``(dx, dy)`` shows. The move is exact
    when ``R`` only rolls about the optical axis; otherwise the dropped depth
    component of the lifted shift leaves a small residual.
    """
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    tx, ty = window_shift_to_translation(intr, R, dx, dy)
    return depth * tx, depth * ty


def translate_pose(pose: RigidPose, dtx: float, dty: float) -> RigidPose:
    return RigidPose(pose.R, pose.T + np.array([dtx, dty, 0.0]))


def shift_principal_point(intr: Intrinsics, ox: float, oy: float) -> Intrinsics:
    return replace(intr, cx=intr.cx - ox, cy=intr.cy - oy)


def widen(intr: Intrinsics, margin: int) -> Intrinsics:
    """The camera of an image padded by ``margin`` pixels on every side."""
    return replace(intr, cx=intr.cx + margin, cy=intr.cy + margin,
                   width=intr.width + 2 * margin, height=intr.height + 2 * margin)


def pose_facing_camera(R, center_cam) -> RigidPose:
    """Pose whose canonical origin appears at camera-space ``center_cam``."""
    R = np.asarray(R, dtype=np.float64)
    return RigidPose(R, -R @ np.asarray(center_cam, dtype=np.float64))


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
