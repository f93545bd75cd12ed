"""Emission-absorption ray marching over tri-plane fields.

Every scale renders a ``map_res x map_res`` map with 32 feature channels
(first three are RGB) plus an opacity plane. The full-resolution canvas is
tiled from the 16 finest patches, with gradients flowing through a single
active patch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .camera import DEFAULT_FAR, DEFAULT_NEAR, Intrinsics, PixelGrid, RigidPose, grid_rays, pixel_rays
from .triplane import RealizedLevel, sample_level

FEATURE_DIM = 32

Field = Callable[[torch.Tensor], tuple[torch.Tensor, torch.Tensor]]


@dataclass(frozen=True)
class MarchConfig:
    n_samples: int = 64
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR
    jitter: bool = False
    background: float = 0.0
    chunk: int = 8192

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("need at least two samples per ray")
        if not self.near < self.far:
            raise ValueError(f"near {self.near} must be below far {self.far}")


class DecoderMLP(nn.Module):
    """Four linear layers shared across scales: features -> (sigma, 32 channels).

    Hidden activations are softplus so finite-difference checks never straddle
    a kink. Density is ``density_scale * softplus``; RGB is sigmoid; the other
    29 channels are left linear.
    """

    def __init__(self, in_dim: int = 16, hidden: int = 64, density_scale: float = 10.0, sigma_bias: float = -2.0):
        super().__init__()
        self.layers = nn.ModuleList([nn.Linear(in_dim, hidden), nn.Linear(hidden, hidden),
                                     nn.Linear(hidden, hidden), nn.Linear(hidden, 1 + FEATURE_DIM)])
        self.density_scale = density_scale
        with torch.no_grad():
            self.layers[-1].bias[0] = sigma_bias

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        for layer in self.layers[:-1]:
            x = F.softplus(layer(x))
        out = self.layers[-1](x)
        sigma = self.density_scale * F.softplus(out[:, 0])
        feat = torch.cat([torch.sigmoid(out[:, 1:4]), out[:, 4:]], dim=1)
        return sigma, feat


def level_field(level: RealizedLevel, decoder: DecoderMLP) -> Field:
    return lambda x: decoder(sample_level(level, x))


def sample_depths(n_rays: int, cfg: MarchConfig, dtype=torch.float32, generator=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample distances ``(n_rays, n)`` and quadrature widths ``(n,)``.

    Midpoints of equal bins without jitter, one uniform draw per bin with it.
    Both modes weight every sample by the bin width.
    """
    n = cfg.n_samples
    width = (cfg.far - cfg.near) / n
    edges = cfg.near + width * torch.arange(n, dtype=torch.float64)
    if cfg.jitter:
        u = torch.rand((n_rays, n), generator=generator, dtype=torch.float64)
    else:
        u = torch.full((n_rays, n), 0.5, dtype=torch.float64)
    t = edges + width * u
    return t.to(dtype), torch.full((n,), width, dtype=dtype)


def composite(sigma: torch.Tensor, feat: torch.Tensor, delta: torch.Tensor, background: float
              ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Front-to-back compositing of ``sigma (R, n)`` and ``feat (R, n, C)``.

    Returns ``(feature, opacity, weights, final transmittance)``.
    """
    tau = sigma * delta
    alpha = 1.0 - torch.exp(-tau)
    # T_i = prod_{k<i} (1 - alpha_k) = exp(-sum_{k<i} tau_k)
    acc = torch.cumsum(tau, dim=1)
    trans = torch.exp(-torch.cat([torch.zeros_like(acc[:, :1]), acc[:, :-1]], dim=1))
    t_final = torch.exp(-acc[:, -1])
    weights = trans * alpha
    out = (weights.unsqueeze(-1) * feat).sum(dim=1) + t_final.unsqueeze(-1) * background
    return out, 1.0 - t_final, weights, t_final


def march_rays(field: Field, pose: RigidPose, origins: torch.Tensor, dirs: torch.Tensor, cfg: MarchConfig,
               generator=None) -> tuple[torch.Tensor, torch.Tensor]:
    """March ``(R, 3)`` rays through ``field``; returns ``(R, 32)`` features and ``(R,)`` opacity.

    Sample points are taken in camera space and mapped to canonical space by
    ``R @ x + T`` before the field is queried.
    """
    dtype = origins.dtype
    t, delta = sample_depths(origins.shape[0], cfg, dtype, generator)
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    R = torch.tensor(pose.R, dtype=dtype)
    T = torch.tensor(pose.T, dtype=dtype)
    canon = pts.reshape(-1, 3) @ R.T + T
    sigma, feat = field(canon)
    n = cfg.n_samples
    out, opacity, _, _ = composite(sigma.reshape(-1, n), feat.reshape(-1, n, feat.shape[-1]), delta, cfg.background)
    return out, opacity


def march_ray(field: Field, pose: RigidPose, ray, cfg: MarchConfig, dtype=torch.float64):
    """Single-ray convenience wrapper around :func:`march_rays`."""
    cfg = MarchConfig(cfg.n_samples, ray.near, ray.far, cfg.jitter, cfg.background, cfg.chunk)
    o = torch.as_tensor(np.asarray(ray.origin)[None], dtype=dtype)
    d = torch.as_tensor(np.asarray(ray.direction)[None], dtype=dtype)
    feat, opacity = march_rays(field, pose, o, d, cfg)
    return feat[0], opacity[0]


@dataclass
class RenderedMap:
    scale: int
    patch: int
    features: torch.Tensor   # (32, H, W)
    opacity: torch.Tensor    # (H, W)

    @property
    def rgb(self) -> torch.Tensor:
        return self.features[:3]


def render_rays(field: Field, pose: RigidPose, origins: np.ndarray, dirs: np.ndarray, cfg: MarchConfig,
                dtype=torch.float32, generator=None) -> tuple[torch.Tensor, torch.Tensor]:
    """March an ``(..., 3)`` bundle of rays chunk by chunk; output keeps the leading shape."""
    shape = origins.shape[:-1]
    o = torch.as_tensor(np.ascontiguousarray(origins.reshape(-1, 3)), dtype=dtype)
    d = torch.as_tensor(np.ascontiguousarray(dirs.reshape(-1, 3)), dtype=dtype)
    feats, ops = [], []
    for s in range(0, o.shape[0], cfg.chunk):
        f, a = march_rays(field, pose, o[s:s + cfg.chunk], d[s:s + cfg.chunk], cfg, generator)
        feats.append(f)
        ops.append(a)
    feat = torch.cat(feats).reshape(*shape, -1)
    return feat, torch.cat(ops).reshape(shape)


def render_grid(field: Field, pose: RigidPose, intr: Intrinsics, cam_pose: RigidPose, grid: PixelGrid,
                cfg: MarchConfig, dtype=torch.float32, generator=None) -> RenderedMap:
    o, d = grid_rays(intr, cam_pose, grid)
    feat, opacity = render_rays(field, pose, o, d, cfg, dtype, generator)
    return RenderedMap(grid.scale, grid.patch, feat.permute(2, 0, 1), opacity)


def render_map(levels: Sequence[RealizedLevel], decoder: DecoderMLP, pose: RigidPose, intr: Intrinsics,
               cam_pose: RigidPose, grid: PixelGrid, cfg: MarchConfig, dtype=torch.float32,
               generator=None) -> RenderedMap:
    """Render one scale's map using the realized level whose tag matches ``grid.scale``."""
    match = [lv for lv in levels if lv.scale == grid.scale]
    if not match:
        raise ValueError(f"no realized level for scale {grid.scale}")
    return render_grid(level_field(match[0], decoder), pose, intr, cam_pose, grid, cfg, dtype, generator)


def render_mask(levels, decoder, pose, intr, cam_pose, grid, cfg, dtype=torch.float32, generator=None) -> torch.Tensor:
    return render_map(levels, decoder, pose, intr, cam_pose, grid, cfg, dtype, generator).opacity


def render_image(field: Field, pose: RigidPose, intr: Intrinsics, cam_pose: RigidPose, cfg: MarchConfig,
                 width: int | None = None, height: int | None = None, dtype=torch.float32):
    """Every pixel of an ``height x width`` image; returns ``(32, H, W)`` features and ``(H, W)`` opacity."""
    width = intr.width if width is None else width
    height = intr.height if height is None else height
    u, v = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    o, d = pixel_rays(intr, cam_pose, u, v)
    feat, opacity = render_rays(field, pose, o, d, cfg, dtype)
    return feat.permute(2, 0, 1), opacity


@dataclass
class CompositeMap:
    features: torch.Tensor      # (32, 4m, 4m)
    opacity: torch.Tensor       # (4m, 4m)
    active: int
    grad_flags: list[bool] = field(default_factory=list)


def compose_full(patches: Sequence[RenderedMap], active: int) -> CompositeMap:
    """Tile the 16 finest patches row-major; only ``active`` keeps its graph."""
    idx = sorted(p.patch for p in patches)
    if idx != list(range(16)) or any(p.scale != 512 for p in patches):
        raise ValueError(f"need each of the 16 scale-512 patches exactly once, got {idx}")
    if not 0 <= active < 16:
        raise ValueError(f"active patch {active} out of range")
    by_idx = {p.patch: p for p in patches}
    feats, ops = [], []
    for k in range(16):
        p = by_idx[k]
        f, o = (p.features, p.opacity) if k == active else (p.features.detach(), p.opacity.detach())
        feats.append(f)
        ops.append(o)
    rows_f = [torch.cat(feats[r * 4:(r + 1) * 4], dim=2) for r in range(4)]
    rows_o = [torch.cat(ops[r * 4:(r + 1) * 4], dim=1) for r in range(4)]
    return CompositeMap(torch.cat(rows_f, dim=1), torch.cat(rows_o, dim=0), active,
                        [k == active for k in range(16)])
