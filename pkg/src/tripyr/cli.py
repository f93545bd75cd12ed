"""Command-line entry points.

Each ``cmd_*`` function is usable from Python and returns a process exit code;
``main`` wires them to ``argparse`` subcommands. Paths inside a run config are
taken relative to the working directory, so a config copied between run
directories keeps producing identical checkpoint text.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np
import torch

from .camera import Intrinsics, RigidPose, shift_principal_point, widen
from .config import RunConfig, stream
from .formats import parse_floats, read_ppm, write_ppm
from .gradcheck import gradient_suite
from .metrics import psnr, sharpness_difference
from .render import MarchConfig, render_image
from .synth import Manifest, SceneFile, analytic_field, euler_to_matrix, make_dataset, make_trajectory
from .trainer import NumericalError, load_checkpoint, march_config, render_canvas, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("tripyr")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _guard(fn, *args, **kw) -> int:
    """Run ``fn`` and map failures to an exit code plus a one-line diagnostic."""
    try:
        return fn(*args, **kw)
    except CliError as e:
        code, msg = e.code, str(e)
    except NumericalError as e:
        code, msg = EXIT_NUMERICAL, f"numerical failure: {e}"
    except OSError as e:
        where = e.filename if e.filename is not None else ""
        code, msg = EXIT_IO, f"{where}: {e.strerror or e}" if where else str(e)
    except ValueError as e:
        code, msg = EXIT_CONFIG, f"config error: {e}"
    print(f"tripyr: {msg}".replace("\n", " "), file=sys.stderr)
    return code


def load_config(path) -> RunConfig:
    if not os.path.isfile(path):
        raise CliError(EXIT_IO, f"{path}: config file not found")
    try:
        return RunConfig.load(path)
    except ValueError as e:
        raise CliError(EXIT_CONFIG, f"{path}: {e}") from e


def _set_threads(threads: int) -> None:
    if threads < 1:
        raise CliError(EXIT_CONFIG, f"--threads must be >= 1, got {threads}")
    torch.set_num_threads(threads)


# --- commands --------------------------------------------------------------

def cmd_synth_data(config, threads: int = 1) -> int:
    cfg = load_config(config)
    if not cfg.scene:
        raise CliError(EXIT_CONFIG, f"{config}: no scene file given")
    if not os.path.isfile(cfg.scene):
        raise CliError(EXIT_IO, f"{cfg.scene}: scene file not found")
    try:
        sf = SceneFile.load(cfg.scene)
    except (ValueError, TypeError) as e:
        raise CliError(EXIT_CONFIG, f"{cfg.scene}: {e}") from e
    man = make_dataset(sf, cfg.dataset, cfg.seed, threads=threads)
    print(f"wrote {len(man.frames)} frames ({len(man.holdout)} held out) to {cfg.dataset}")
    return EXIT_OK


def cmd_train(config, threads: int = 1) -> int:
    """Train from a run config.

    ``threads`` is validated but training itself always runs single-threaded,
    which is what makes checkpoints independent of it.
    """
    cfg = load_config(config)
    _set_threads(threads)
    manifest_path = os.path.join(cfg.dataset, "manifest.txt")
    if not os.path.isfile(manifest_path):
        raise CliError(EXIT_IO, f"{manifest_path}: dataset manifest not found")
    result = train(cfg)
    print(f"trained {cfg.iterations} iterations; held-out psnr {result.holdout_psnr:.3f} dB; "
          f"log {os.path.join(cfg.output, 'loss_log.csv')}")
    return EXIT_OK


def _load_model(checkpoint):
    if not os.path.isfile(os.path.join(checkpoint, "manifest.txt")):
        raise CliError(EXIT_IO, f"{checkpoint}: not a checkpoint directory")
    model, _, _, cfg = load_checkpoint(checkpoint)
    model.eval()
    return model, cfg


def _load_manifest(dataset) -> Manifest:
    path = os.path.join(dataset, "manifest.txt")
    if not os.path.isfile(path):
        raise CliError(EXIT_IO, f"{path}: dataset manifest not found")
    return Manifest.load(dataset)


def _find_frame(man: Manifest, frame: int):
    for r in man.frames:
        if r.frame == frame:
            return r
    raise CliError(EXIT_CONFIG, f"frame {frame} not in dataset")


def orbit_pose(pose: RigidPose, yaw_deg: float) -> RigidPose:
    """Swing the camera about the canonical origin by ``yaw_deg`` around the vertical axis."""
    Ry = euler_to_matrix(np.radians(yaw_deg), 0.0, 0.0)
    return RigidPose(Ry @ pose.R, Ry @ pose.T)


def cmd_render(checkpoint, out, dataset=None, frame: int | None = None, pose=None, sweep: int = 0,
               sweep_deg: float = 20.0, threads: int = 1) -> int:
    """Render one frame, an explicit pose, or a viewpoint sweep to PPM files."""
    _set_threads(threads)
    model, cfg = _load_model(checkpoint)
    man = _load_manifest(dataset or cfg.dataset)
    if frame is None and pose is None:
        raise CliError(EXIT_CONFIG, "render needs --frame or --pose")
    beta, gamma, base = np.zeros(man.n_exp), None, None
    if frame is not None:
        rec = _find_frame(man, frame)
        beta, base = rec.beta, rec.pose
        gamma = rec.gamma_index if rec.split == "train" else None
    if pose is not None:
        vals = parse_floats(pose) if isinstance(pose, str) else np.asarray(pose, dtype=np.float64)
        if vals.size != 12:
            raise CliError(EXIT_CONFIG, f"--pose needs 12 numbers (R row-major, T), got {vals.size}")
        base = RigidPose.from_list(vals)
    mcfg = march_config(cfg, man, train=False)
    angles = np.linspace(-sweep_deg, sweep_deg, sweep) if sweep > 1 else [0.0]
    paths = []
    for k, a in enumerate(angles):
        comp = render_canvas(model, beta, gamma, orbit_pose(base, a), man.intrinsics, mcfg, cfg.map_res)
        img = comp.features[:3].permute(1, 2, 0).double().numpy()
        path = out if sweep <= 1 else f"{os.path.splitext(out)[0]}_{k:03d}.ppm"
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        write_ppm(path, img)
        paths.append(path)
    print("wrote " + ", ".join(paths))
    return EXIT_OK


def _window(img: np.ndarray, man: Manifest, path) -> np.ndarray:
    w, h, m = man.intrinsics.width, man.intrinsics.height, man.margin
    if img.shape[:2] == (h + 2 * m, w + 2 * m):
        return img[m:m + h, m:m + w]
    if img.shape[:2] == (h, w):
        return img
    raise CliError(EXIT_IO, f"{path}: image is {img.shape[1]}x{img.shape[0]}, expected {w}x{h} "
                            f"or {w + 2 * m}x{h + 2 * m}")


def evaluate(man: Manifest, predict) -> list[tuple[int, float, float]]:
    """PSNR and sharpness difference of ``predict(rec)`` against every held-out frame."""
    rows = []
    for rec in man.holdout:
        gt = _window(man.image(rec), man, os.path.join(man.root, rec.image))
        pred = predict(rec)
        rows.append((rec.frame, psnr(pred, gt), sharpness_difference(pred, gt)))
    return rows


def cmd_eval(dataset, out, checkpoint=None, predictions=None, threads: int = 1) -> int:
    """Score held-out frames and write ``frame,psnr,sd`` rows.

    Frames come from rendering ``checkpoint`` or, with ``predictions``, from
    PPM files laid out like the dataset's own frames.
    """
    _set_threads(threads)
    man = _load_manifest(dataset)
    if predictions is not None:
        def predict(rec):
            path = os.path.join(predictions, rec.image)
            return _window(read_ppm(path), man, path)
    elif checkpoint is not None:
        model, cfg = _load_model(checkpoint)
        if man.intrinsics.width != 4 * cfg.map_res:
            raise CliError(EXIT_CONFIG, f"checkpoint map_res {cfg.map_res} does not fit a "
                                        f"{man.intrinsics.width}-pixel window")
        mcfg = march_config(cfg, man, train=False)

        def predict(rec):
            comp = render_canvas(model, rec.beta, None, rec.pose, man.intrinsics, mcfg, cfg.map_res)
            return comp.features[:3].permute(1, 2, 0).double().numpy()
    else:
        raise CliError(EXIT_CONFIG, "eval needs --checkpoint or --predictions")
    rows = evaluate(man, predict)
    if any(not np.isfinite(r[1]) or not np.isfinite(r[2]) for r in rows):
        raise NumericalError("non-finite metric")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("frame", "psnr", "sd"))
        for f, p, s in rows:
            w.writerow((f, repr(p), repr(s)))
    print(f"{len(rows)} frames; mean psnr {np.mean([r[1] for r in rows]):.3f} dB; "
          f"mean sd {np.mean([r[2] for r in rows]):.3f} dB -> {out}")
    return EXIT_OK


def augment_pair(sf: SceneFile, beta, pose: RigidPose, ox: int, oy: int, mcfg: MarchConfig, wide_render=None):
    """The window seen through a shifted principal point next to the same crop of the widened render.

    Returns ``(shifted, cropped, wide)`` RGB arrays; pass ``wide`` back in to reuse it.
    """
    field = analytic_field(sf.scene, beta)
    intr, cam = sf.intrinsics, RigidPose.identity()
    wide_intr = widen(intr, sf.margin)
    if wide_render is None:
        feat, _ = render_image(field, pose, wide_intr, cam, mcfg, dtype=torch.float64)
        wide_render = feat[:3].permute(1, 2, 0).numpy()
    shifted_intr = shift_principal_point(wide_intr, ox, oy)
    shifted_intr = Intrinsics(shifted_intr.fx, shifted_intr.fy, shifted_intr.cx, shifted_intr.cy,
                              intr.width, intr.height)
    feat, _ = render_image(field, pose, shifted_intr, cam, mcfg, dtype=torch.float64)
    shifted = feat[:3].permute(1, 2, 0).numpy()
    cropped = wide_render[oy:oy + intr.height, ox:ox + intr.width]
    return shifted, cropped, wide_render


def cmd_augment_demo(config, out, offsets: int = 1, threads: int = 1) -> int:
    """Write shifted-principal-point and wide-crop renders side by side and report their max difference."""
    _set_threads(threads)
    cfg = load_config(config)
    if not os.path.isfile(cfg.scene):
        raise CliError(EXIT_IO, f"{cfg.scene}: scene file not found")
    sf = SceneFile.load(cfg.scene)
    rng = stream(cfg.seed, "crop")
    pose_rng = np.random.default_rng(cfg.seed)
    pose, beta = make_trajectory(sf.trajectory, sf.scene.n_exp, pose_rng)[0]
    mcfg = MarchConfig(cfg.n_samples, sf.near, sf.far, background=cfg.background, chunk=cfg.chunk)
    os.makedirs(out, exist_ok=True)
    wide, worst = None, 0.0
    for k in range(offsets):
        ox, oy = (int(x) for x in rng.integers(0, 2 * sf.margin + 1, size=2))
        shifted, cropped, wide = augment_pair(sf, beta, pose, ox, oy, mcfg, wide)
        diff = float(np.max(np.abs(shifted - cropped)))
        worst = max(worst, diff)
        write_ppm(os.path.join(out, f"pair_{k:02d}.ppm"), np.concatenate([shifted, cropped], axis=1))
        print(f"offset ({ox},{oy}) max abs diff {diff:.3e}")
    print(f"max abs diff over {offsets} offsets: {worst:.3e}")
    if worst > 1e-6:
        raise NumericalError(f"principal-point shift and crop disagree by {worst:.3e}")
    return EXIT_OK


def cmd_grad_check(config=None, probes: int = 72, threads: int = 1) -> int:
    _set_threads(threads)
    seed = load_config(config).seed if config else 0
    report = gradient_suite(seed=seed, probes_per_array=probes)
    for line in report.lines():
        print(line)
    if not report.passed:
        raise NumericalError(f"gradient check failed, max rel err {report.max_rel_err:.3e}")
    return EXIT_OK


# --- argument parsing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tripyr", description="Tri-plane pyramid radiance fields on synthetic heads.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--threads", type=int, default=1, help="worker cap (default 1)")
        return s

    s = add("synth-data", "mint a synthetic dataset")
    s.add_argument("--config", required=True)
    s = add("train", "train a model")
    s.add_argument("--config", required=True)
    s = add("render", "render a frame, a pose, or a viewpoint sweep")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dataset")
    s.add_argument("--frame", type=int)
    s.add_argument("--pose", help="12 comma-separated numbers: R row-major then T")
    s.add_argument("--sweep", type=int, default=0, help="number of views in a yaw sweep")
    s.add_argument("--sweep-deg", type=float, default=20.0)
    s = add("eval", "score held-out frames")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--predictions", help="directory of PPM frames laid out like the dataset")
    s = add("augment-demo", "compare principal-point shift with cropping")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--offsets", type=int, default=1)
    s = add("grad-check", "run the gradient-check suite")
    s.add_argument("--config")
    s.add_argument("--probes", type=int, default=72, help="probes per array")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    a = build_parser().parse_args(argv)
    cmd = a.command
    if cmd == "synth-data":
        return _guard(cmd_synth_data, a.config, a.threads)
    if cmd == "train":
        return _guard(cmd_train, a.config, a.threads)
    if cmd == "render":
        return _guard(cmd_render, a.checkpoint, a.out, a.dataset, a.frame, a.pose, a.sweep, a.sweep_deg, a.threads)
    if cmd == "eval":
        return _guard(cmd_eval, a.dataset, a.out, a.checkpoint, a.predictions, a.threads)
    if cmd == "augment-demo":
        return _guard(cmd_augment_demo, a.config, a.out, a.offsets, a.threads)
    return _guard(cmd_grad_check, a.config, a.probes, a.threads)


if __name__ == "__main__":
    sys.exit(main())
