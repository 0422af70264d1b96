"""
Stage 2: conditional flow matching and the Euler sampler
========================================================

The acoustic model learns a velocity field u(x_t, t | tokens, reference) along
the straight path x_t = (1 - t) x0 + t x1 from Gaussian noise x0 to the target
frames x1, and generates by integrating dx/dt = u from t = 0 to 1 with plain
Euler steps. The reference region of the conditioning pack is visible to
attention but never enters the loss.

A one-dimensional toy makes the sampler's behaviour easy to see: train on a
constant target, then sample with fewer and fewer steps.
"""

import sys
from pathlib import Path

import numpy as np
import torch

import emoprefix  # noqa: F401
from emoprefix.acoustic_model import fm_sample, interpolate

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from oracles import constant_flow_toy, euler_halving_ratio  # noqa: E402

x0, x1 = torch.randn(2, 3, 1), torch.randn(2, 3, 1)
print("path endpoints exact:", torch.equal(interpolate(x0, x1, torch.zeros(2)), x0),
      torch.equal(interpolate(x0, x1, torch.ones(2)), x1))

model, packs = constant_flow_toy(seed=0, c=1.5)
seeds = list(range(len(packs)))
# The distance to the constant bottoms out at the training error of the field;
# the distance to a 1024-step solution isolates the discretisation error.
ref = np.stack(fm_sample(model, packs, 1024, seeds))
print("steps  mean|x - 1.5|  mean|x - x_fine|")
for n in (1, 2, 4, 8, 16, 32, 64):
    x = np.stack(fm_sample(model, packs, n, seeds))
    print(f"{n:5d}  {np.abs(x - 1.5).mean():12.4f}  {np.abs(x - ref).mean():15.5f}")

# Euler is first order, so halving the step should roughly halve the error
# against a fine-step solution of the same learned ODE.
print(f"error ratio err(16) / err(32) = {euler_halving_ratio(model, packs):.2f}")
