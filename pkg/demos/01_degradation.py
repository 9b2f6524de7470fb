"""How the forward chain degrades an image, and why its noise stays white.

Run: python3 demos/01_degradation.py
"""

import numpy as np

from udpm import RngStream, Schedule, downsample, forward_marginal_sample, make_box_kernel
from udpm.oracle import dense_h
from udpm.training import ToyDataset

kernel = make_box_kernel(2)
x0 = ToyDataset("blobs", size=16, count=1).image(0)

# One application of H halves each side.  Box taps are 1/2, so a constant
# image gains a factor of 2 per level.
print("x0", x0.shape, "-> H x0", downsample(x0, kernel).shape)
print("H on ones(4x4):", downsample(np.ones((4, 4)), kernel).ravel())

# The rows of H are orthonormal when the kernel fits inside one stride, so
# H e is again standard white noise.
h = dense_h(kernel, (8, 8)).matrix
print("max |H H^T - I| =", np.abs(h @ h.T - np.eye(16)).max())

# The schedule divides by the DC gain, so signal and noise stay comparable.
sched = Schedule.for_kernel(kernel, 3)
rng = RngStream(0, 0)
for l in (1 / 3, 2 / 3, 1.0):
    xl = forward_marginal_sample(x0, l, sched, kernel, rng)
    print(f"l={l:.2f}  alpha_bar={sched.alpha_bar(l):.5f}  x_l shape={xl.shape}  std={xl.std():.3f}")
