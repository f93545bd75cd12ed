"""Mint a small synthetic dataset, train the pyramid, score held-out frames.

This goes through the same entry points as the command line: a scene file and
a run config on disk, then synth-data, train and eval. At this size it runs in
a few minutes on one CPU core; quality is modest, the point is the pipeline.

    python demos/train_and_evaluate.py [out_dir]
"""
import csv
import os
import sys

from tripyr import cli
from tripyr.camera import Intrinsics
from tripyr.config import RunConfig
from tripyr.synth import SceneFile, TrajectoryConfig

out = os.path.abspath(sys.argv[1] if len(sys.argv) > 1 else "demo_out/train")
os.makedirs(out, exist_ok=True)

scene = os.path.join(out, "scene.txt")
SceneFile(intrinsics=Intrinsics(64.0, 64.0, 32.0, 32.0, 64, 64), margin=14, oracle_samples=192,
          trajectory=TrajectoryConfig(n_frames=12)).save(scene)
config = os.path.join(out, "run.txt")
RunConfig(scene=scene, dataset=os.path.join(out, "data"), output=os.path.join(out, "run"), iterations=400,
          checkpoint_every=100, n_samples=24, map_res=16, resolutions=(8, 16, 32), channels=8, decoder_hidden=32,
          cond_hidden=16, lr=2e-3).save(config)

assert cli.main(["synth-data", "--config", config]) == 0
assert cli.main(["train", "--config", config]) == 0

with open(os.path.join(out, "run", "loss_log.csv")) as fh:
    for row in csv.DictReader(fh):
        if row["psnr_holdout"]:
            print(f"iteration {row['iter']:>4}: loss {float(row['loss_total']):.4f}, "
                  f"held-out PSNR {float(row['psnr_holdout']):.2f} dB")

ck = os.path.join(out, "run", "checkpoints", "iter_000400")
assert cli.main(["eval", "--dataset", os.path.join(out, "data"), "--checkpoint", ck,
                 "--out", os.path.join(out, "eval.csv")]) == 0
assert cli.main(["render", "--checkpoint", ck, "--dataset", os.path.join(out, "data"), "--frame", "0",
                 "--sweep", "5", "--out", os.path.join(out, "orbit.ppm")]) == 0
with open(os.path.join(out, "eval.csv")) as fh:
    print(fh.read().strip())
print(f"orbit frames written to {out}")
