#!/usr/bin/env python3
"""Splatting basics: a handful of Gaussians, one camera, an orbit.

Run from the repo root: ``python demos/01_splatting_basics.py``. Images land in ``demo_out/splat``.
"""

from pathlib import Path

import numpy as np
import torch

from avatarsplat.gaussians import GaussianCloud
from avatarsplat.splatting import Camera, look_at, orbit_camera, rasterize, save_png

out = Path("demo_out/splat")
out.mkdir(parents=True, exist_ok=True)

# %% three coloured blobs in a row, the middle one nearest to the camera
positions = torch.tensor([[-0.6, 0.0, 0.0], [0.0, 0.0, 0.4], [0.6, 0.0, 0.0]])
cloud = GaussianCloud(
    positions=positions,
    rotations=torch.tensor([[1.0, 0, 0, 0]] * 3),
    log_scales=torch.log(torch.tensor([[0.25, 0.25, 0.25], [0.15, 0.4, 0.15], [0.25, 0.25, 0.25]])),
    opacity_logits=torch.full((3, 1), 2.0),
    features=torch.eye(3),
)
cam = Camera(80.0, 80.0, 31.5, 31.5, 64, 64, look_at((0.0, 0.0, 4.0)))

img = rasterize(cloud, cam)
print("coverage (mean alpha):", float(img.alpha.mean()))
print("centre pixel rgb:", img.rgb[32, 32].numpy().round(3))
save_png(img.rgb.numpy(), out / "front.png")

# %% gradients flow back to every Gaussian parameter
feats = cloud.features.clone().requires_grad_(True)
loss = rasterize(GaussianCloud(**{**cloud.tensors(), "features": feats}), cam).rgb[..., 1].sum()
loss.backward()
# each entry is that Gaussian's compositing weight summed over the image
print("d(green sum)/d(features):", feats.grad[:, 1].numpy().round(2))

# %% orbit around the origin
for yaw in np.arange(-60, 61, 30):
    view = rasterize(cloud, orbit_camera(cam, float(yaw)))
    save_png(view.rgb.numpy(), out / f"orbit_{int(yaw):+04d}.png")
print("wrote", len(list(out.glob("*.png"))), "images to", out)
