"""Losses, Adam, checkpoints and the multi-scale training loop."""
from __future__ import annotations

import csv
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .camera import Intrinsics, PixelGrid, RigidPose, all_grids
from .config import RunConfig, stream
from .facegeom import FrameRecord, augment_record, record_intrinsics, sample_crop
from .metrics import psnr
from .render import DecoderMLP, MarchConfig, compose_full, level_field, render_grid, render_map
from .synth import Manifest
from .triplane import (AXES, GAMMA_DIM, LEVEL_TAGS, TriPlanePyramid, array_from_segment, plane_from_segment,
                       read_segment, write_segment)

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """NaN/Inf in a loss or gradient, or a failed gradient check."""


class GraphConsumedError(RuntimeError):
    pass


# --- model -------------------------------------------------------------

class FieldModel(nn.Module):
    """Pyramid, shared decoder and the per-frame latent table."""

    def __init__(self, resolutions=(64, 128, 256), channels: int = 16, extent: float = 1.0, n_exp: int = 4,
                 n_frames: int = 1, decoder_hidden: int = 64, cond_hidden: int = 64,
                 density_scale: float = 10.0, init_std: float = 0.1):
        super().__init__()
        stds = tuple(init_std if k == 0 else 0.1 * init_std for k in range(len(resolutions)))
        self.pyramid = TriPlanePyramid(resolutions, channels, extent, n_exp, cond_hidden, stds)
        self.decoder = DecoderMLP(channels, decoder_hidden, density_scale)
        self.gamma = nn.Parameter(torch.zeros(n_frames, GAMMA_DIM))

    @classmethod
    def from_config(cls, cfg: RunConfig, n_exp: int, n_frames: int) -> "FieldModel":
        torch.manual_seed(int(stream(cfg.seed, "init").integers(2 ** 31)))
        m = cls(cfg.resolutions, cfg.channels, cfg.extent, n_exp, n_frames, cfg.decoder_hidden,
                cfg.cond_hidden, cfg.density_scale, cfg.init_std)
        return m.double() if cfg.verify_mode else m

    @property
    def dtype(self):
        return self.gamma.dtype

    def condition(self, beta, gamma_index: int | None):
        beta = torch.as_tensor(np.asarray(beta), dtype=self.dtype)
        gamma = torch.zeros(GAMMA_DIM, dtype=self.dtype) if gamma_index is None else self.gamma[gamma_index]
        return beta, gamma

    def realize(self, beta, gamma_index: int | None):
        return self.pyramid.realize(*self.condition(beta, gamma_index))


def param_set(model: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    """Every learnable array once, in registration order."""
    return OrderedDict(model.named_parameters())


# --- losses ----------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    mask: float = 0.1
    perp: float = 0.0

    def __post_init__(self):
        if self.mask < 0 or self.perp < 0:
            raise ValueError("loss weights must be nonnegative")


def loss_rgb(maps, targets) -> torch.Tensor:
    """Sum over scales of the mean absolute RGB error; maps are ``(>=3, H, W)``, targets ``(3, H, W)``."""
    if len(maps) != len(targets):
        raise ValueError(f"{len(maps)} maps but {len(targets)} targets")
    total = 0.0
    for m, t in zip(maps, targets):
        m = getattr(m, "features", m)
        if m[:3].shape != t.shape:
            raise ValueError(f"shape mismatch {tuple(m[:3].shape)} vs {tuple(t.shape)}")
        total = total + (m[:3] - t).abs().mean()
    return total


def loss_mask(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return ((pred - gt) ** 2).mean()


def total_loss(rgb, mask, w: LossWeights = LossWeights()):
    # perceptual term not implemented; its weight slot stays in the sum
    return rgb + w.perp * 0.0 + w.mask * mask


def backward(loss: torch.Tensor, params: "OrderedDict[str, torch.Tensor]") -> "OrderedDict[str, torch.Tensor]":
    """Gradients of ``loss`` for every entry; parameters off the graph get zeros."""
    try:
        grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    except RuntimeError as e:
        if "second time" in str(e) or "freed" in str(e):
            raise GraphConsumedError("loss graph was already consumed by a previous backward") from e
        raise
    return OrderedDict((k, torch.zeros_like(p) if g is None else g) for (k, p), g in zip(params.items(), grads))


# --- Adam ------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, lr: float = 1e-4) -> "AdamState":
        return cls(lr=lr, m={k: torch.zeros_like(p) for k, p in params.items()},
                   v={k: torch.zeros_like(p) for k, p in params.items()})


@torch.no_grad()
def adam_step(params, grads, state: AdamState) -> None:
    """Bias-corrected Adam update applied in place to ``params`` and ``state``."""
    for k, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {k!r} at step {state.step + 1}")
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match {k} {tuple(params[k].shape)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(directory, model: FieldModel, state: AdamState, iteration: int, cfg: RunConfig) -> str:
    os.makedirs(directory, exist_ok=True)
    params = param_set(model)
    with open(os.path.join(directory, "params.bin"), "wb") as fh:
        for name, p in params.items():
            a = p.detach().cpu().numpy()
            if name.startswith("pyramid.planes."):
                k = int(name.rsplit(".", 1)[1])
                for i, axis in enumerate(AXES):
                    res, _, c = a[i].shape
                    write_segment(fh, f"plane level={LEVEL_TAGS[k]} axis={axis} res={res} channels={c} "
                                      f"extent={model.pyramid.extent!r} name={name}", a[i])
            else:
                write_segment(fh, f"array name={name} shape={','.join(map(str, a.shape))}", a)
    with open(os.path.join(directory, "adam.bin"), "wb") as fh:
        for tag, store in (("m", state.m), ("v", state.v)):
            for name, a in store.items():
                a = a.detach().cpu().numpy()
                write_segment(fh, f"array name={tag}/{name} shape={','.join(map(str, a.shape))}", a)
    n_exp = model.pyramid.n_exp
    lines = [f"iteration = {iteration}", f"adam_step = {state.step}", f"adam_lr = {state.lr!r}",
             f"n_exp = {n_exp}", f"n_frames = {model.gamma.shape[0]}"]
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write("# checkpoint\n" + "\n".join(lines) + "\n" + "# run config\n" + cfg.serialize())
    return str(directory)


def load_checkpoint(directory) -> tuple[FieldModel, AdamState, int, RunConfig]:
    from .formats import parse_kv
    with open(os.path.join(directory, "manifest.txt")) as fh:
        kv = parse_kv(fh.read())
    head = {k: kv.pop(k) for k in ("iteration", "adam_step", "adam_lr", "n_exp", "n_frames")}
    cfg = RunConfig.parse("\n".join(f"{k} = {v}" for k, v in kv.items()))
    model = FieldModel.from_config(cfg, int(head["n_exp"]), int(head["n_frames"]))
    params = param_set(model)
    planes: dict[str, list] = {}
    with open(os.path.join(directory, "params.bin"), "rb") as fh:
        while (seg := read_segment(fh)) is not None:
            meta, data = seg
            if meta["kind"] == "plane":
                planes.setdefault(meta["name"], []).append(plane_from_segment(meta, data))
            else:
                params[meta["name"]].data.copy_(torch.from_numpy(array_from_segment(meta, data).copy()))
    for name, stack in planes.items():
        params[name].data.copy_(torch.from_numpy(np.stack(stack)))
    state = AdamState.for_params(params, float(head["adam_lr"]))
    state.step = int(head["adam_step"])
    with open(os.path.join(directory, "adam.bin"), "rb") as fh:
        while (seg := read_segment(fh)) is not None:
            meta, data = seg
            tag, name = meta["name"].split("/", 1)
            getattr(state, tag)[name].copy_(torch.from_numpy(array_from_segment(meta, data).copy()))
    return model, state, int(head["iteration"]), cfg


# --- training loop -----------------------------------------------------------

@dataclass(frozen=True)
class IterationPlan:
    frame: int
    crop: tuple[int, int]
    patch: int
    quadrant: int
    seed: int

    def __post_init__(self):
        if not (0 <= self.patch < 16 and 0 <= self.quadrant < 4):
            raise ValueError(f"bad plan {self}")


def draw_plan(plan_rng, crop_rng, n_train: int, margin: int, sliding_window: bool) -> IterationPlan:
    frame = int(plan_rng.integers(n_train))
    patch = int(plan_rng.integers(16))
    quadrant = int(plan_rng.integers(4))
    seed = int(plan_rng.integers(2 ** 31))
    # the crop stream advances either way so toggling augmentation leaves other draws alone
    crop = sample_crop(crop_rng, 2 * margin + 1, 1)
    if not sliding_window:
        crop = (margin, margin)
    return IterationPlan(frame, crop, patch, quadrant, seed)


def march_config(cfg: RunConfig, manifest: Manifest, train: bool) -> MarchConfig:
    n = cfg.n_samples if train or not cfg.eval_samples else cfg.eval_samples
    return MarchConfig(n, manifest.near, manifest.far, cfg.jitter and train, cfg.background, cfg.chunk)


def iteration_grids(depth: int, plan: IterationPlan, map_res: int) -> list[PixelGrid]:
    grids = [PixelGrid.make(128, 0, map_res)]
    if depth >= 2:
        grids.append(PixelGrid.make(256, plan.quadrant, map_res))
    if depth >= 3:
        grids.append(PixelGrid.make(512, plan.patch, map_res))
    return grids


def crop_targets(image: np.ndarray, mask: np.ndarray, crop, canvas: int, dtype):
    ox, oy = crop
    img = torch.as_tensor(np.ascontiguousarray(image[oy:oy + canvas, ox:ox + canvas].transpose(2, 0, 1)), dtype=dtype)
    msk = torch.as_tensor(np.ascontiguousarray(mask[oy:oy + canvas, ox:ox + canvas]), dtype=dtype)
    return img, msk


def iteration_loss(model: FieldModel, rec: FrameRecord, intr: Intrinsics, image, mask, grids, mcfg: MarchConfig,
                   weights: LossWeights, map_res: int, generator=None, gamma_index=None):
    """Total, RGB and mask losses for one record over the given grids."""
    dtype = model.dtype
    levels = model.realize(rec.beta, rec.gamma_index if gamma_index is None else gamma_index)
    cam = RigidPose.identity()
    img, msk = crop_targets(image, mask, rec.crop, 4 * map_res, dtype)
    maps, targets = [], []
    for g in grids:
        maps.append(render_map(levels, model.decoder, rec.pose, intr, cam, g, mcfg, dtype, generator))
        rows, cols = g.canvas_slice()
        targets.append(img[:, rows, cols])
    rows, cols = grids[-1].canvas_slice()
    lr = loss_rgb(maps, targets)
    lm = loss_mask(maps[-1].opacity, msk[rows, cols])
    return total_loss(lr, lm, weights), lr, lm


@torch.no_grad()
def render_canvas(model: FieldModel, beta, gamma_index, pose: RigidPose, intr: Intrinsics, mcfg: MarchConfig,
                  map_res: int, cam_pose: RigidPose | None = None):
    """Full-resolution window from the finest level, as 16 composed patches."""
    levels = model.realize(beta, gamma_index)
    cam = RigidPose.identity() if cam_pose is None else cam_pose
    fld = level_field(levels[-1], model.decoder)
    patches = []
    for g in all_grids(512, map_res):
        m = render_grid(fld, pose, intr, cam, g, mcfg, model.dtype)
        patches.append(m)
    return compose_full(patches, 0)


def evaluate_holdout(model: FieldModel, manifest: Manifest, cfg: RunConfig, images=None) -> list[tuple[int, float]]:
    mcfg = march_config(cfg, manifest, train=False)
    canvas = 4 * cfg.map_res
    frames = manifest.holdout
    if cfg.eval_frames:
        frames = frames[:cfg.eval_frames]
    out = []
    for rec in frames:
        comp = render_canvas(model, rec.beta, None, rec.pose, manifest.intrinsics, mcfg, cfg.map_res)
        pred = comp.features[:3].permute(1, 2, 0).double().numpy()
        img = images[rec.frame] if images is not None else manifest.image(rec)
        m = manifest.margin
        out.append((rec.frame, psnr(pred, img[m:m + canvas, m:m + canvas])))
    return out


@dataclass
class TrainResult:
    rows: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    holdout_psnr: float = float("nan")
    model: FieldModel | None = None


LOG_HEADER = ("iter", "loss_total", "loss_rgb", "loss_mask", "psnr_holdout")


def train(cfg: RunConfig, manifest: Manifest | None = None, write: bool = True) -> TrainResult:
    """Optimise a fresh model on ``cfg.dataset``; writes a loss log and checkpoints under ``cfg.output``."""
    cfg.validate()
    if manifest is None:
        manifest = Manifest.load(cfg.dataset)
    intr = manifest.intrinsics
    if intr.width != 4 * cfg.map_res or intr.height != 4 * cfg.map_res:
        raise ValueError(f"window {intr.width}x{intr.height} does not match map_res {cfg.map_res} "
                         f"(needs {4 * cfg.map_res})")
    # intra-op reductions are order sensitive; one thread keeps runs byte-identical
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        return _train(cfg, manifest, intr, write)
    finally:
        torch.set_num_threads(prev_threads)


def _train(cfg: RunConfig, manifest: Manifest, intr: Intrinsics, write: bool) -> TrainResult:
    model = FieldModel.from_config(cfg, manifest.n_exp, len(manifest.frames))
    params = param_set(model)
    state = AdamState.for_params(params, cfg.lr)
    weights = LossWeights(cfg.lambda_mask, cfg.lambda_perp)
    mcfg = march_config(cfg, manifest, train=True)
    train_frames = manifest.train
    images = {r.frame: manifest.image(r) for r in manifest.frames}
    masks = {r.frame: manifest.mask(r) for r in train_frames}
    plan_rng, crop_rng = stream(cfg.seed, "plan"), stream(cfg.seed, "crop")
    result = TrainResult(model=model)
    if write:
        os.makedirs(cfg.output, exist_ok=True)
        cfg.save(os.path.join(cfg.output, "config.txt"))
    for it in range(cfg.iterations):
        plan = draw_plan(plan_rng, crop_rng, len(train_frames), manifest.margin, cfg.enable_sliding_window)
        rec = augment_record(train_frames[plan.frame], *plan.crop)
        gen = torch.Generator().manual_seed(plan.seed)
        grids = iteration_grids(cfg.pyramid_depth, plan, cfg.map_res)
        loss, lr, lm = iteration_loss(model, rec, record_intrinsics(intr, rec), images[rec.frame],
                                      masks[rec.frame], grids, mcfg, weights, cfg.map_res, gen)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite loss at iteration {it}")
        grads = backward(loss, params)
        adam_step(params, grads, state)
        row = [it, loss.item(), lr.item(), lm.item(), ""]
        done = it + 1
        if done % cfg.checkpoint_every == 0 or done == cfg.iterations:
            scores = evaluate_holdout(model, manifest, cfg, images)
            row[4] = float(np.mean([s for _, s in scores]))
            result.holdout_psnr = row[4]
            log.info("iter %d loss %.5f holdout psnr %.3f", done, row[1], row[4])
            if write:
                result.checkpoints.append(save_checkpoint(
                    os.path.join(cfg.output, "checkpoints", f"iter_{done:06d}"), model, state, done, cfg))
        result.rows.append(row)
    if write:
        write_log(os.path.join(cfg.output, "loss_log.csv"), result.rows)
    return result


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r[0]] + [repr(x) if isinstance(x, float) else x for x in r[1:]])
