"""Tri-plane feature-pyramid radiance fields for synthetic talking-head scenes.

The package pairs a differentiable volume renderer with an analytic scene
oracle so every stage, from ray generation to the training loop, can be
checked against closed-form or brute-force references.
"""
from .camera import Intrinsics, PixelGrid, RigidPose, pixel_rays, shift_principal_point, widen
from .config import RunConfig
from .gradcheck import gradient_suite
from .metrics import psnr, sharpness_difference
from .render import MarchConfig, composite, compose_full, render_image, render_map
from .synth import AnalyticScene, Manifest, SceneFile, make_dataset
from .trainer import FieldModel, load_checkpoint, save_checkpoint, train
from .triplane import TriPlanePyramid

__all__ = [
    "AnalyticScene", "FieldModel", "Intrinsics", "Manifest", "MarchConfig", "PixelGrid", "RigidPose", "RunConfig",
    "SceneFile", "TriPlanePyramid", "compose_full", "composite", "gradient_suite", "load_checkpoint",
    "make_dataset", "pixel_rays", "psnr", "render_image", "render_map", "save_checkpoint", "sharpness_difference",
    "shift_principal_point", "train", "widen",
]
__version__ = "0.1.0"
