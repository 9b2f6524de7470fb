"""Train a small denoiser on toy blobs and draw a few samples.

Run: python3 demos/02_train_and_sample.py [out_dir]
A few hundred steps take well under a minute; raise ``steps`` for nicer blobs.
"""

import sys
from pathlib import Path

from udpm import RngStream, TrainConfig, sample, train
from udpm.io import Checkpoint, save_checkpoint, save_latent, save_png, tile

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

cfg = TrainConfig.from_dict({
    "dataset": {"generator": "blobs", "size": 16, "count": 32},
    "steps": 400,
    "ema_decay": 0.99,
})
result = train(cfg)
losses = result.losses()
print(f"loss over the first/last 50 steps: {losses[:50].mean():.3f} / {losses[-50:].mean():.3f}")
save_checkpoint(Checkpoint.from_training(result), out / "checkpoint")

# Three network calls per 16x16 sample: 2x2 noise -> 4x4 -> 8x8 -> 16x16.
model = Checkpoint.from_training(result).denoiser(use_ema=True)
images = []
for i in range(8):
    img, record = sample(model, result.schedule, result.kernel, rng=RngStream(7, i))
    save_latent(record, out / f"sample_{i}.lat")
    images.append(img.data)
save_png(tile(images, 2, 4), out / "samples.png")
print("wrote", out / "samples.png")
