# %% [markdown]
# # Toy shift sweep
#
# Train the small glyph detector with plain strided convolutions, then slide
# the glyph one pixel at a time across the canvas and record the peak of the
# output score map. A shift-equivariant network would give a flat line.

# %%
import numpy as np

from shiftvar.tensor import seeded_rng
from shiftvar.toy import ToyModel, TrainConfig, make_training_set, oscillation_stats, shift_sweep, train

SEED = 1
data = make_training_set(64, spacing=4, rng=seeded_rng(SEED))
print(len(data), "training images, glyph centres on a 4 px grid")

# %%
model = ToyModel("strided_conv", channels=8, seed=SEED)
result = train(model, data, TrainConfig(seed=SEED))
print(f"final loss {result.final_loss:.5f}")

# %% [markdown]
# Positions on the training grid are learned; in between, the response
# dips. The pattern repeats with the total encoder stride.

# %%
sweep = shift_sweep(model, 64)
stats = oscillation_stats(sweep)
print(f"amplitude {stats.amplitude:.3f}, period {stats.dominant_period} px")
for x, v in sweep.rows()[:12]:
    print(f"x={x:2d}  {'#' * int(40 * v):40s} {v:.3f}")

# %%
control = ToyModel("strided_conv", channels=8, seed=SEED, downsample=False)
train(control, data, TrainConfig(seed=SEED))
flat = oscillation_stats(shift_sweep(control, 64))
print(f"stride-1 control amplitude {flat.amplitude:.4f}")
