"""Sliding the crop window is the same as moving the principal point.

Renders the analytic head once through a camera widened by the margin, then
renders each window directly by shifting the principal point. The two agree
to float64 rounding, so augmentation never needs the wide image at all.

    python demos/sliding_window.py [out_dir]
"""
import os
import sys

import numpy as np

from tripyr.camera import Intrinsics, pose_facing_camera
from tripyr.cli import augment_pair
from tripyr.formats import write_ppm
from tripyr.render import MarchConfig
from tripyr.synth import SceneFile, euler_to_matrix

out = sys.argv[1] if len(sys.argv) > 1 else "demo_out/sliding_window"
os.makedirs(out, exist_ok=True)

sf = SceneFile(intrinsics=Intrinsics(96.0, 96.0, 48.0, 48.0, 96, 96), margin=21)
pose = pose_facing_camera(euler_to_matrix(0.2, -0.1, 0.0), [0.0, 0.0, 2.0])
beta = np.array([0.8, 0.0, 0.5, 0.0])
mcfg = MarchConfig(n_samples=48, near=sf.near, far=sf.far)

wide = None
for k, (ox, oy) in enumerate([(0, 0), (21, 21), (42, 10)]):
    shifted, cropped, wide = augment_pair(sf, beta, pose, ox, oy, mcfg, wide)
    print(f"window at ({ox:2d},{oy:2d}): max |shifted - cropped| = {np.max(np.abs(shifted - cropped)):.2e}")
    write_ppm(os.path.join(out, f"window_{k}.ppm"), np.concatenate([shifted, cropped], axis=1))
write_ppm(os.path.join(out, "wide.ppm"), wide)
print(f"images written to {out}")
