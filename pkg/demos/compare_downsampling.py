# %% [markdown]
# # Comparing downsampling strategies
#
# Same data, same seeds; only the downsampling blocks differ. A low-pass
# step before subsampling (binomial blur or strided average pooling) flattens
# the sweep curve.

# %%
import statistics

from shiftvar.downsample import STRATEGY_TOKENS
from shiftvar.tensor import seeded_rng
from shiftvar.toy import ToyModel, TrainConfig, make_training_set, oscillation_stats, shift_sweep, train

SEEDS = (1, 2, 3)

# %%
amplitudes = {s: [] for s in STRATEGY_TOKENS}
for seed in SEEDS:
    data = make_training_set(64, 4, seeded_rng(seed))
    for strategy in STRATEGY_TOKENS:
        model = ToyModel(strategy, 8, seed)
        train(model, data, TrainConfig(seed=seed))
        amplitudes[strategy].append(oscillation_stats(shift_sweep(model, 64)).amplitude)

# %%
for strategy, amps in amplitudes.items():
    print(f"{strategy:13s} median amplitude {statistics.median(amps):.3f}  per seed {[round(a, 3) for a in amps]}")
