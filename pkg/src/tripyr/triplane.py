"""Tri-plane feature fields arranged as a coarse-to-fine pyramid.

Each level holds three axis-aligned feature planes (xy, xz, yz) over one
shared canonical square ``[-extent, extent]^2``. A point's feature is the sum
of its three bilinear plane samples. Finer levels receive the upsampled,
gain-weighted realization of the level above them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

AXES = ("xy", "xz", "yz")
# coordinate indices (column axis, row axis) projected onto each plane
AXIS_DIMS = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}
LEVEL_TAGS = (128, 256, 512)
GAMMA_DIM = 32


@dataclass
class RealizedLevel:
    """Plane data ``(3, res, res, C)`` in (row, col, channel) order, axes as :data:`AXES`."""

    planes: torch.Tensor
    extent: float
    scale: int

    @property
    def res(self) -> int:
        return self.planes.shape[1]

    @property
    def channels(self) -> int:
        return self.planes.shape[-1]


def sample_level(level: RealizedLevel, points: torch.Tensor) -> torch.Tensor:
    """Sum of bilinear samples from the three planes, ``(N, 3) -> (N, C)``.

    Texel centres sit at ``-extent + (i + 0.5) * 2 * extent / res``; queries
    outside the square clamp to the border texels.
    """
    planes = level.planes.permute(0, 3, 1, 2)  # (3, C, H, W)
    p = points / level.extent
    grid = torch.stack([p[:, list(AXIS_DIMS[a])] for a in AXES], dim=0).unsqueeze(2)  # (3, N, 1, 2)
    out = F.grid_sample(planes, grid.to(planes.dtype), mode="bilinear", padding_mode="border", align_corners=False)
    return out.sum(dim=0)[:, :, 0].transpose(0, 1)


def upsample_planes(planes: torch.Tensor, res: int) -> torch.Tensor:
    coarse = planes.shape[1]
    if res % coarse:
        raise ValueError(f"resolution {res} is not an integer multiple of {coarse}")
    x = planes.permute(0, 3, 1, 2)
    x = F.interpolate(x, size=(res, res), mode="bilinear", align_corners=False)
    return x.permute(0, 2, 3, 1)


class ConditionNet(nn.Module):
    """Two-layer perceptron from ``beta (+) gamma`` to per-level, per-channel ``(s, b)``."""

    def __init__(self, n_exp: int, channels: int, n_levels: int, hidden: int = 64):
        super().__init__()
        self.channels = channels
        self.n_levels = n_levels
        self.hidden = nn.Linear(n_exp + GAMMA_DIM, hidden)
        self.out = nn.Linear(hidden, 2 * channels * n_levels)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, beta: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
        h = torch.tanh(self.hidden(torch.cat([beta, gamma], dim=-1)))
        return self.out(h).reshape(self.n_levels, 2, self.channels)


def modulate(planes: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    return (1.0 + scale) * planes + shift


class TriPlanePyramid(nn.Module):
    """Learnable plane data per level, lateral gains, and the condition network."""

    def __init__(self, resolutions=(64, 128, 256), channels: int = 16, extent: float = 1.0,
                 n_exp: int = 4, cond_hidden: int = 64, init_std=0.1, gain_init: float = 1.0):
        super().__init__()
        resolutions = tuple(int(r) for r in resolutions)
        if not 1 <= len(resolutions) <= 3:
            raise ValueError("pyramid needs one to three levels")
        if any(r < 2 for r in resolutions):
            raise ValueError("plane resolution must be at least 2")
        for a, b in zip(resolutions, resolutions[1:]):
            if b < a:
                raise ValueError("level resolutions must be nondecreasing")
            if b % a:
                raise ValueError(f"resolution {b} is not an integer multiple of {a}")
        if np.isscalar(init_std):
            init_std = (init_std,) * len(resolutions)
        self.resolutions = resolutions
        self.channels = channels
        self.extent = float(extent)
        self.n_exp = n_exp
        self.planes = nn.ParameterList(
            nn.Parameter(torch.randn(3, r, r, channels) * s) for r, s in zip(resolutions, init_std))
        self.gains = nn.Parameter(torch.full((len(resolutions) - 1,), float(gain_init)))
        self.cond = ConditionNet(n_exp, channels, len(resolutions), cond_hidden)

    @property
    def depth(self) -> int:
        return len(self.resolutions)

    def realize(self, beta: torch.Tensor, gamma: torch.Tensor, upto: int | None = None) -> list[RealizedLevel]:
        """Modulated levels with top-down lateral connections, coarse first."""
        upto = self.depth if upto is None else upto
        mod = self.cond(beta, gamma)
        levels = []
        prev = None
        for k in range(upto):
            planes = modulate(self.planes[k], mod[k, 0], mod[k, 1])
            if prev is not None:
                planes = planes + self.gains[k - 1] * upsample_planes(prev, planes.shape[1])
            levels.append(RealizedLevel(planes, self.extent, LEVEL_TAGS[k]))
            prev = planes
        return levels


def matched_resolutions(depth: int, budget_texels: int, base: int | None = None) -> tuple[int, ...]:
    """Doubling resolutions for ``depth`` levels whose total texel count is closest to the budget."""
    if depth == 1:
        return (int(round(np.sqrt(budget_texels))),)
    # r^2 (1 + 4 + 16 ...) = budget
    factor = sum(4 ** k for k in range(depth))
    r = base or max(2, int(round(np.sqrt(budget_texels / factor))))
    return tuple(r * 2 ** k for k in range(depth))


def texel_count(resolutions) -> int:
    return sum(r * r for r in resolutions)


# --- checkpoint segments -------------------------------------------------
# A segment is one ASCII header line followed by raw little-endian float32
# values in C order. Plane headers carry axis/res/channels/extent.

def write_segment(fh, header: str, array) -> None:
    a = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    fh.write((header.strip() + f" bytes={a.nbytes}\n").encode("ascii"))
    fh.write(a.tobytes(order="C"))


def read_segment(fh) -> tuple[dict, bytes] | None:
    line = fh.readline()
    if not line:
        return None
    parts = line.decode("ascii").split()
    meta = {"kind": parts[0]}
    for p in parts[1:]:
        k, v = p.split("=", 1)
        meta[k] = v
    n = int(meta["bytes"])
    data = fh.read(n)
    if len(data) != n:
        raise IOError(f"truncated segment {meta}")
    return meta, data


def write_pyramid_planes(fh, pyramid: TriPlanePyramid) -> None:
    for k, p in enumerate(pyramid.planes):
        data = p.detach().cpu().numpy()
        for a, axis in enumerate(AXES):
            arr = np.ascontiguousarray(data[a], dtype="<f4")
            res, _, c = arr.shape
            write_segment(fh, f"plane level={LEVEL_TAGS[k]} axis={axis} res={res} channels={c} "
                              f"extent={pyramid.extent!r}", arr)


def plane_from_segment(meta: dict, data: bytes) -> np.ndarray:
    res, c = int(meta["res"]), int(meta["channels"])
    return np.frombuffer(data, dtype="<f4").reshape(res, res, c)


def array_from_segment(meta: dict, data: bytes) -> np.ndarray:
    shape = tuple(int(s) for s in meta["shape"].split(",")) if meta.get("shape") else ()
    return np.frombuffer(data, dtype="<f4").reshape(shape)

