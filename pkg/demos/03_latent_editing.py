"""Blend and nudge the stored noise maps of generated samples.

Run after 02_train_and_sample.py: python3 demos/03_latent_editing.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from udpm import InterpolationGrid, RngStream, perturb, sample
from udpm.io import load_checkpoint, load_latent, save_png, tile

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
ckpt = load_checkpoint(out / "checkpoint")
model = ckpt.denoiser()
corners = tuple(load_latent(out / f"sample_{i}.lat") for i in range(4))

# Bilinear weights over the four corners; corner cells replay the originals.
grid = InterpolationGrid(corners, 4, 4)
cells = [sample(model, ckpt.schedule, ckpt.kernel, record=rec)[0].data for _, rec in grid.cells()]
save_png(tile(cells, 4, 4), out / "interpolation.png")

# How far each level's noise map moves the output depends on how much the
# model relies on that level; a short toy run mostly uses the finer ones.
base = sample(model, ckpt.schedule, ckpt.kernel, record=corners[0])[0].data
for step in range(ckpt.schedule.steps, 0, -1):
    rec = perturb(corners[0], step, 0.5, RngStream(3, step))
    img = sample(model, ckpt.schedule, ckpt.kernel, record=rec)[0].data
    print(f"perturb e_{step}: mean squared change {np.mean((img - base) ** 2):.5f}")
print("wrote", out / "interpolation.png")
