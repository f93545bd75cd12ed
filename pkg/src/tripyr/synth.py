"""Closed-form synthetic scenes, a brute-force oracle renderer, and dataset minting.

The scene lives in canonical space: an ellipsoid "head" carrying one
spherical bump per expression coefficient, or a thin textured slab used for
planar translation tests. Densities use a short linear ramp at the boundary
so they are exactly ``sigma0`` inside and exactly zero outside.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np
import torch

from .camera import (Intrinsics, PixelGrid, RigidPose, grid_rays, pixel_rays, pose_facing_camera,
                     translate_pose, widen, window_shift_to_translation_metric)
from .facegeom import FrameRecord, bump_anchors
from .formats import (fmt_float, fmt_floats, parse_floats, parse_kv, read_pgm, read_ppm, write_pgm,
                      write_ppm)
from .render import FEATURE_DIM, RenderedMap

CHANNEL_PHASE = np.array([0.0, 2.1, 4.2])


@dataclass(frozen=True)
class AnalyticScene:
    kind: str = "head"                       # "head" or "slab"
    center: tuple = (0.0, 0.0, 0.0)
    semi_axes: tuple = (0.5, 0.6, 0.5)
    sigma0: float = 30.0
    edge: float = 0.02                       # ramp half-width (normalized radius for head, units for slab)
    color_mode: str = "sinusoid"             # "sinusoid", "checker" or "flat"
    period: float = 0.25                     # spatial period of the colour pattern, canonical units
    base_color: tuple = (0.75, 0.55, 0.45)
    amplitude: float = 0.2
    n_exp: int = 4
    bump_radius: float = 0.12
    bump_gain: float = 0.08
    bump_color: tuple = (0.2, 0.35, 0.8)
    slab_half_thickness: float = 0.03
    slab_half_size: float = 0.8
    # optional second ellipsoid (a torso stand-in); zero semi-axes leave it out
    torso_offset: tuple = (0.0, 0.95, 0.1)
    torso_semi_axes: tuple = (0.0, 0.0, 0.0)
    torso_color: tuple = (0.35, 0.6, 0.4)

    def __post_init__(self):
        if self.kind not in ("head", "slab"):
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.color_mode not in ("sinusoid", "checker", "flat"):
            raise ValueError(f"unknown colour mode {self.color_mode!r}")
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be nonnegative")
        if min(self.semi_axes) <= 0:
            raise ValueError("semi-axes must be positive")
        if min(self.torso_semi_axes) < 0 or (self.has_torso and min(self.torso_semi_axes) == 0):
            raise ValueError("torso semi-axes must be all zero or all positive")
        if self.period <= 0:
            raise ValueError("period must be positive")

    @property
    def has_torso(self) -> bool:
        return self.kind == "head" and max(self.torso_semi_axes) > 0

    @property
    def anchors(self) -> np.ndarray:
        """Bump centres on the ellipsoid surface, one per expression."""
        return np.asarray(self.center) + bump_anchors(self.n_exp) * np.asarray(self.semi_axes)


def bump_radii(scene: AnalyticScene, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    return scene.bump_radius + scene.bump_gain * beta


def _ramp(x):
    return np.clip(x, 0.0, 1.0)


def _memberships(scene: AnalyticScene, pts: np.ndarray, beta) -> tuple[np.ndarray, np.ndarray]:
    """Body membership and strongest bump membership, both in [0, 1]."""
    c = np.asarray(scene.center)
    if scene.kind == "slab":
        w = scene.edge
        depth = _ramp((scene.slab_half_thickness + w - np.abs(pts[..., 2] - c[2])) / (2 * w))
        lateral = np.all(np.abs(pts[..., :2] - c[:2]) <= scene.slab_half_size, axis=-1)
        return depth * lateral, np.zeros(pts.shape[:-1])
    q = np.linalg.norm((pts - c) / np.asarray(scene.semi_axes), axis=-1)
    body = _ramp((1.0 + scene.edge - q) / (2 * scene.edge))
    if scene.has_torso:
        body = np.maximum(body, _torso_membership(scene, pts))
    bump = np.zeros(pts.shape[:-1])
    w = scene.edge * min(scene.semi_axes)
    for p, r in zip(scene.anchors, bump_radii(scene, beta)):
        if r <= 0:
            continue
        d = np.linalg.norm(pts - p, axis=-1)
        bump = np.maximum(bump, _ramp((r + w - d) / (2 * w)))
    return body, bump


def _torso_membership(scene: AnalyticScene, pts: np.ndarray) -> np.ndarray:
    c = np.asarray(scene.center) + np.asarray(scene.torso_offset)
    q = np.linalg.norm((pts - c) / np.asarray(scene.torso_semi_axes), axis=-1)
    return _ramp((1.0 + scene.edge - q) / (2 * scene.edge))


def scene_density(scene: AnalyticScene, points, beta) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    body, bump = _memberships(scene, pts, beta)
    return scene.sigma0 * np.maximum(body, bump)


def _pattern(scene: AnalyticScene, pts: np.ndarray) -> np.ndarray:
    w = 2 * np.pi / scene.period
    x, y, z = (pts[..., k:k + 1] for k in range(3))
    if scene.color_mode == "flat":
        return np.zeros(pts.shape[:-1] + (3,))
    if scene.color_mode == "checker":
        s = np.sin(w * x) * np.sin(w * y) * (np.sin(w * z) if scene.kind == "head" else 1.0)
        return np.sign(s) * np.ones(3)
    terms = np.sin(w * x + CHANNEL_PHASE) + np.sin(w * y + 2 * CHANNEL_PHASE)
    if scene.kind == "head":
        return (terms + np.sin(w * z + 3 * CHANNEL_PHASE)) / 3.0
    return terms / 2.0


def scene_color(scene: AnalyticScene, points, beta) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    base = np.asarray(scene.base_color)
    if scene.has_torso:
        on_torso = (_torso_membership(scene, pts) > 0)[..., None]
        base = np.where(on_torso, np.asarray(scene.torso_color), base)
    rgb = base + scene.amplitude * _pattern(scene, pts)
    body, bump = _memberships(scene, pts, beta)
    tint = (bump * (1.0 - body))[..., None]
    rgb = (1.0 - tint) * rgb + tint * np.asarray(scene.bump_color)
    return np.clip(rgb, 0.0, 1.0)


def pattern_period_pixels(scene: AnalyticScene, intr: Intrinsics, depth: float) -> float:
    """Colour period measured on the image plane at ``depth``."""
    return scene.period * intr.fx / depth


# --- oracle renderer -----------------------------------------------------

def bounding_radius(scene: AnalyticScene) -> float:
    """Radius around ``scene.center`` outside which density is exactly zero."""
    if scene.kind == "slab":
        return float(np.sqrt(2 * scene.slab_half_size ** 2 + (scene.slab_half_thickness + scene.edge) ** 2))
    body = max(scene.semi_axes) * (1.0 + scene.edge)
    bump = max(scene.semi_axes) + scene.bump_radius + abs(scene.bump_gain) + scene.edge * min(scene.semi_axes)
    torso = 0.0
    if scene.has_torso:
        torso = np.linalg.norm(scene.torso_offset) + max(scene.torso_semi_axes) * (1.0 + scene.edge)
    return float(max(body, bump, torso)) * 1.01


def oracle_rays(scene: AnalyticScene, beta, pose: RigidPose, origins, dirs, n_samples: int = 1024,
                near: float = 1.0, far: float = 3.0, background: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint quadrature with an explicit sample loop; ``(N, 3)`` RGB and ``(N,)`` opacity.

    Samples outside the scene's bounding sphere carry zero density and are
    skipped without changing the result.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    width = (far - near) / n_samples
    rgb = np.zeros((o.shape[0], 3))
    trans = np.ones(o.shape[0])
    # canonical-space ray: x(t) = oc + t * dc
    oc = o @ pose.R.T + pose.T - np.asarray(scene.center)
    dc = d @ pose.R.T
    rad = bounding_radius(scene)
    b = np.sum(oc * dc, axis=1)
    disc = b * b - (np.sum(oc * oc, axis=1) - rad * rad)
    live = np.flatnonzero(disc > 0)
    root = np.sqrt(disc[live])
    t0, t1 = -b[live] - root, -b[live] + root
    for i in range(n_samples):
        t = near + width * (i + 0.5)
        sel = live[(t0 <= t) & (t <= t1)]
        if sel.size == 0:
            continue
        x = (o[sel] + t * d[sel]) @ pose.R.T + pose.T
        sigma = scene_density(scene, x, beta)
        hit = sigma > 0
        if not hit.any():
            continue
        idx = sel[hit]
        alpha = 1.0 - np.exp(-sigma[hit] * width)
        rgb[idx] += (trans[idx] * alpha)[:, None] * scene_color(scene, x[hit], beta)
        trans[idx] *= 1.0 - alpha
    return rgb + trans[:, None] * background, 1.0 - trans


def oracle_render(scene: AnalyticScene, beta, pose: RigidPose, intr: Intrinsics, cam_pose: RigidPose,
                  grid: PixelGrid, n_samples: int = 1024, near: float = 1.0, far: float = 3.0,
                  background: float = 0.0) -> RenderedMap:
    o, d = grid_rays(intr, cam_pose, grid)
    rgb, opacity = oracle_rays(scene, beta, pose, o, d, n_samples, near, far, background)
    m = grid.map_res
    feats = np.zeros((FEATURE_DIM, m, m))
    feats[:3] = rgb.reshape(m, m, 3).transpose(2, 0, 1)
    feats[3:] = background
    return RenderedMap(grid.scale, grid.patch, torch.from_numpy(feats), torch.from_numpy(opacity.reshape(m, m)))


def oracle_image(scene: AnalyticScene, beta, pose: RigidPose, intr: Intrinsics, cam_pose: RigidPose,
                 n_samples: int = 1024, near: float = 1.0, far: float = 3.0, background: float = 0.0,
                 rows_per_chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Whole ``intr.height x intr.width`` image: ``(H, W, 3)`` RGB and ``(H, W)`` opacity."""
    u, v = np.meshgrid(np.arange(intr.width) + 0.5, np.arange(intr.height) + 0.5)
    o, d = pixel_rays(intr, cam_pose, u, v)
    rgb = np.zeros((intr.height, intr.width, 3))
    opacity = np.zeros((intr.height, intr.width))
    for r in range(0, intr.height, rows_per_chunk):
        sl = slice(r, r + rows_per_chunk)
        c, a = oracle_rays(scene, beta, pose, o[sl], d[sl], n_samples, near, far, background)
        rgb[sl] = c.reshape(-1, intr.width, 3)
        opacity[sl] = a.reshape(-1, intr.width)
    return rgb, opacity


def analytic_field(scene: AnalyticScene, beta):
    """Engine-compatible field evaluating the closed-form scene (no gradients)."""
    def field_fn(x: torch.Tensor):
        pts = x.detach().cpu().numpy().astype(np.float64)
        sigma = scene_density(scene, pts, beta)
        feat = np.zeros((pts.shape[0], FEATURE_DIM))
        feat[:, :3] = scene_color(scene, pts, beta)
        return torch.from_numpy(sigma).to(x.dtype), torch.from_numpy(feat).to(x.dtype)
    return field_fn


# --- trajectories ----------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryConfig:
    n_frames: int = 40
    depth: float = 2.0
    max_translation: float = 0.15
    max_rotation_deg: float = 12.0
    smoothness: float = 0.9


def euler_to_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    from scipy.spatial.transform import Rotation
    return Rotation.from_euler("yxz", [yaw, pitch, roll]).as_matrix()


def make_trajectory(cfg: TrajectoryConfig, n_exp: int, rng) -> list[tuple[RigidPose, np.ndarray]]:
    """Smooth bounded random walk of head poses and expressions.

    Translation and rotation follow a mean-reverting walk, clipped to the
    configured bounds; expressions are squashed into (-1, 1).
    """
    rng = np.random.default_rng(rng)
    a = cfg.smoothness
    noise = np.sqrt(1.0 - a * a)
    state = rng.standard_normal(5 + n_exp)
    out = []
    max_rot = np.deg2rad(cfg.max_rotation_deg)
    for _ in range(cfg.n_frames):
        state = a * state + noise * rng.standard_normal(state.shape)
        tx, ty = np.clip(0.5 * cfg.max_translation * state[:2], -cfg.max_translation, cfg.max_translation)
        yaw, pitch, roll = np.clip(0.5 * max_rot * state[2:5], -max_rot, max_rot)
        beta = np.tanh(state[5:])
        # canonical frame rotates with the head; camera-space head centre at (tx, ty, depth)
        R = euler_to_matrix(yaw, pitch, roll)
        out.append((pose_facing_camera(R, (tx, ty, cfg.depth)), beta))
    return out


# --- scene files and manifests --------------------------------------------

@dataclass(frozen=True)
class SceneFile:
    """Everything needed to mint a dataset: scene, window camera, trajectory."""

    scene: AnalyticScene = field(default_factory=AnalyticScene)
    intrinsics: Intrinsics = field(default_factory=lambda: Intrinsics(512.0, 512.0, 256.0, 256.0, 512, 512))
    margin: int = 112
    near: float = 1.0
    far: float = 3.0
    oracle_samples: int = 1024
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    holdout_shift: tuple = (0.0, 0.0)

    def serialize(self) -> str:
        lines = ["# synthetic scene description"]
        for f in fields(AnalyticScene):
            v = getattr(self.scene, f.name)
            lines.append(f"scene.{f.name} = {_fmt_value(v)}")
        intr = self.intrinsics
        for k in ("fx", "fy", "cx", "cy"):
            lines.append(f"camera.{k} = {fmt_float(getattr(intr, k))}")
        lines.append(f"camera.width = {intr.width}")
        lines.append(f"camera.height = {intr.height}")
        lines.append(f"camera.margin = {self.margin}")
        lines.append(f"render.near = {fmt_float(self.near)}")
        lines.append(f"render.far = {fmt_float(self.far)}")
        lines.append(f"render.oracle_samples = {self.oracle_samples}")
        for f in fields(TrajectoryConfig):
            lines.append(f"trajectory.{f.name} = {_fmt_value(getattr(self.trajectory, f.name))}")
        lines.append(f"holdout_shift = {fmt_floats(self.holdout_shift)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "SceneFile":
        kv = parse_kv(text)
        scene_kw = {}
        for f in fields(AnalyticScene):
            key = f"scene.{f.name}"
            if key in kv:
                scene_kw[f.name] = _parse_value(kv.pop(key), getattr(AnalyticScene, f.name))
        traj_kw = {}
        for f in fields(TrajectoryConfig):
            key = f"trajectory.{f.name}"
            if key in kv:
                traj_kw[f.name] = _parse_value(kv.pop(key), getattr(TrajectoryConfig, f.name))
        d = cls()
        intr = d.intrinsics
        cam = {k: float(kv.pop(f"camera.{k}")) if f"camera.{k}" in kv else getattr(intr, k)
               for k in ("fx", "fy", "cx", "cy")}
        width = int(kv.pop("camera.width", intr.width))
        height = int(kv.pop("camera.height", intr.height))
        out = cls(scene=AnalyticScene(**scene_kw),
                  intrinsics=Intrinsics(cam["fx"], cam["fy"], cam["cx"], cam["cy"], width, height),
                  margin=int(kv.pop("camera.margin", d.margin)),
                  near=float(kv.pop("render.near", d.near)),
                  far=float(kv.pop("render.far", d.far)),
                  oracle_samples=int(kv.pop("render.oracle_samples", d.oracle_samples)),
                  trajectory=TrajectoryConfig(**traj_kw),
                  holdout_shift=tuple(parse_floats(kv.pop("holdout_shift", "0,0"))))
        if kv:
            raise ValueError(f"unknown scene keys: {sorted(kv)}")
        return out

    @classmethod
    def load(cls, path) -> "SceneFile":
        with open(path) as fh:
            return cls.parse(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.serialize())


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return fmt_float(v)
    if isinstance(v, (tuple, list, np.ndarray)):
        return fmt_floats(v)
    return str(v)


def _parse_value(s: str, like):
    if isinstance(like, bool):
        from .formats import parse_bool
        return parse_bool(s)
    if isinstance(like, int):
        return int(s)
    if isinstance(like, float):
        return float(s)
    if isinstance(like, tuple):
        return tuple(float(x) for x in parse_floats(s))
    return s


@dataclass
class Manifest:
    intrinsics: Intrinsics
    margin: int
    near: float
    far: float
    oracle_samples: int
    n_exp: int
    seed: int
    frames: list[FrameRecord]
    root: str = ""

    @property
    def train(self) -> list[FrameRecord]:
        return [f for f in self.frames if f.split == "train"]

    @property
    def holdout(self) -> list[FrameRecord]:
        return [f for f in self.frames if f.split == "test"]

    def serialize(self) -> str:
        intr = self.intrinsics
        lines = ["# dataset manifest",
                 "# frame = id | beta | gamma_index | pose (R row-major, T) | crop ox,oy | image | mask | split"]
        for k in ("fx", "fy", "cx", "cy"):
            lines.append(f"{k} = {fmt_float(getattr(intr, k))}")
        lines += [f"width = {intr.width}", f"height = {intr.height}", f"margin = {self.margin}",
                  f"near = {fmt_float(self.near)}", f"far = {fmt_float(self.far)}",
                  f"oracle_samples = {self.oracle_samples}", f"n_exp = {self.n_exp}", f"seed = {self.seed}",
                  f"n_frames = {len(self.frames)}"]
        for r in self.frames:
            lines.append(" | ".join([f"frame = {r.frame}", fmt_floats(r.beta), str(r.gamma_index),
                                     fmt_floats(r.pose.to_list()), f"{r.crop[0]},{r.crop[1]}",
                                     r.image, r.mask, r.split]))
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str, root: str = "") -> "Manifest":
        header, frames = [], []
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if line.startswith("frame"):
                frames.append(line)
            elif line:
                header.append(line)
        kv = parse_kv("\n".join(header))
        margin = int(kv["margin"])
        recs = []
        for line in frames:
            parts = [p.strip() for p in line.split("|")]
            if len(parts) != 8:
                raise ValueError(f"bad frame record: {line!r}")
            fid = int(parts[0].split("=", 1)[1])
            ox, oy = (int(x) for x in parts[4].split(","))
            recs.append(FrameRecord(fid, parse_floats(parts[1]), int(parts[2]),
                                    RigidPose.from_list(parse_floats(parts[3])), (ox, oy),
                                    parts[5], parts[6], parts[7], max_offset=2 * margin))
        if "n_frames" in kv and int(kv["n_frames"]) != len(recs):
            raise ValueError(f"manifest declares {kv['n_frames']} frames, found {len(recs)}")
        intr = Intrinsics(float(kv["fx"]), float(kv["fy"]), float(kv["cx"]), float(kv["cy"]),
                          int(kv["width"]), int(kv["height"]))
        return cls(intr, margin, float(kv["near"]), float(kv["far"]), int(kv["oracle_samples"]),
                   int(kv["n_exp"]), int(kv["seed"]), recs, root)

    @classmethod
    def load(cls, directory) -> "Manifest":
        path = os.path.join(directory, "manifest.txt")
        with open(path) as fh:
            return cls.parse(fh.read(), str(directory))

    def image(self, rec: FrameRecord) -> np.ndarray:
        return read_ppm(os.path.join(self.root, rec.image))

    def mask(self, rec: FrameRecord) -> np.ndarray:
        return read_pgm(os.path.join(self.root, rec.mask))


def holdout_count(n_frames: int) -> int:
    return max(1, int(n_frames * 0.2))


def make_dataset(sf: SceneFile, out_dir, seed: int, threads: int = 1) -> Manifest:
    """Render every trajectory frame at the widened resolution and write a manifest.

    The last 20% of frames are held out. Held-out poses are translated so the
    head lands ``holdout_shift`` pixels away from where the trajectory put it.
    """
    n = sf.trajectory.n_frames
    if n < 5:
        raise ValueError(f"need at least 5 frames, got {n}")
    traj = make_trajectory(sf.trajectory, sf.scene.n_exp, np.random.default_rng(seed))
    n_test = holdout_count(n)
    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    wide = widen(sf.intrinsics, sf.margin)
    cam = RigidPose.identity()
    dx, dy = sf.holdout_shift
    records = []
    for t, (pose, beta) in enumerate(traj):
        split = "train" if t < n - n_test else "test"
        if split == "test" and (dx or dy):
            shift = window_shift_to_translation_metric(sf.intrinsics, pose.R, sf.trajectory.depth, -dx, -dy)
            pose = translate_pose(pose, *shift)
        records.append(FrameRecord(t, beta, t, pose, (sf.margin, sf.margin),
                                   f"frames/{t:04d}.ppm", f"frames/{t:04d}_mask.pgm", split,
                                   max_offset=2 * sf.margin))

    def mint(rec: FrameRecord):
        rgb, opacity = oracle_image(sf.scene, rec.beta, rec.pose, wide, cam, sf.oracle_samples, sf.near, sf.far)
        write_ppm(os.path.join(out_dir, rec.image), rgb)
        write_pgm(os.path.join(out_dir, rec.mask), (opacity > 0.5).astype(np.float64))

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        list(pool.map(mint, records))
    manifest = Manifest(sf.intrinsics, sf.margin, sf.near, sf.far, sf.oracle_samples, sf.scene.n_exp, seed,
                        records, str(out_dir))
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write(manifest.serialize())
    sf.save(os.path.join(out_dir, "scene.txt"))
    return manifest
