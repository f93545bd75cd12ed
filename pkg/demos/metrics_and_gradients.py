"""Image metrics and the gradient check.

PSNR and sharpness difference on a few hand-made pairs, then the full
finite-difference sweep over every learnable array of the training loss.

    python demos/metrics_and_gradients.py
"""
import numpy as np

from tripyr.gradcheck import gradient_suite
from tripyr.metrics import psnr, sharpness_difference

rng = np.random.default_rng(0)
img = rng.uniform(0.2, 0.8, (32, 32, 3))
blurred = (img + np.roll(img, 1, 0) + np.roll(img, 1, 1) + np.roll(img, (1, 1), (0, 1))) / 4
print(f"identical:        PSNR {psnr(img, img):6.2f} dB   SD {sharpness_difference(img, img):6.2f} dB")
print(f"offset by 0.1:    PSNR {psnr(img + 0.1, img):6.2f} dB   SD {sharpness_difference(img + 0.1, img):6.2f} dB")
print(f"2x2 box blur:     PSNR {psnr(blurred, img):6.2f} dB   SD {sharpness_difference(blurred, img):6.2f} dB")

report = gradient_suite(seed=0, probes_per_array=72)
for line in report.lines():
    print(line)
