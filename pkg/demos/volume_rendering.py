"""Volume rendering against closed forms and the analytic oracle.

A uniform medium has transmittance exp(-sigma * length), and the compositing
weights plus the leftover transmittance always sum to one. The engine and the
independent oracle march the analytic head with the same quadrature, so they
agree to rounding.

    python demos/volume_rendering.py [out_dir]
"""
import os
import sys

import numpy as np
import torch

from tripyr.camera import Intrinsics, PixelGrid, Ray, RigidPose, pose_facing_camera
from tripyr.formats import write_ppm
from tripyr.render import FEATURE_DIM, MarchConfig, composite, march_ray, render_grid
from tripyr.synth import AnalyticScene, analytic_field, euler_to_matrix, oracle_render

out = sys.argv[1] if len(sys.argv) > 1 else "demo_out/volume_rendering"
os.makedirs(out, exist_ok=True)
ID = RigidPose.identity()


def fog(sigma):
    def f(x):
        feat = torch.zeros(x.shape[0], FEATURE_DIM, dtype=x.dtype)
        feat[:, :3] = 1.0
        return torch.full((x.shape[0],), sigma, dtype=x.dtype), feat
    return f


ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 1.0, 3.0)
for sigma in (0.1, 1.0, 5.0):
    _, opacity = march_ray(fog(sigma), ID, ray, MarchConfig(n_samples=32))
    print(f"fog sigma={sigma}: opacity {opacity.item():.12f}, closed form {1 - np.exp(-2 * sigma):.12f}")

sigma = torch.rand(1000, 64, dtype=torch.float64) * 50
_, _, w, t_final = composite(sigma, torch.rand(1000, 64, 3, dtype=torch.float64),
                             torch.full((64,), 0.03, dtype=torch.float64), 0.0)
print(f"max |sum(weights) + T_final - 1| over 1000 random rays: {(w.sum(1) + t_final - 1).abs().max():.1e}")

scene = AnalyticScene()
beta = np.array([1.0, 0.0, 0.0, 1.0])
pose = pose_facing_camera(euler_to_matrix(0.3, 0.1, 0.0), [0.0, 0.0, 2.0])
intr = Intrinsics(64.0, 64.0, 32.0, 32.0, 64, 64)
grid = PixelGrid.make(128, map_res=64)
ours = render_grid(analytic_field(scene, beta), pose, intr, ID, grid, MarchConfig(n_samples=128), torch.float64)
ref = oracle_render(scene, beta, pose, intr, ID, grid, n_samples=128)
print(f"engine vs oracle, 64x64 head: max |diff| = {(ours.features[:3] - ref.features[:3]).abs().max():.1e}")
write_ppm(os.path.join(out, "head.ppm"), ours.features[:3].permute(1, 2, 0).numpy())
print(f"image written to {out}")
