# %% [markdown]
# # A synthetic house
# Base load, a two-state dishwasher and a fridge, sampled every 6 s.

# %%
import numpy as np

from imgnilm.series import PRESETS, synth_house

house = synth_house({"dishwasher": PRESETS["dishwasher"], "fridge": PRESETS["fridge"]},
                    base_load=300.0, days=7, period=6, seed=42, noise_std=30.0)
agg = house.aggregate
print(agg.period, len(agg), agg.end - agg.start)  # 6 s samples, one week

# %%
# The aggregate is base load + noise + every appliance channel
for name, ch in house.appliances.items():
    on = ch.values > 10
    print(f"{name:10s} on {on.mean():6.1%} of the time, peak {ch.values.max():7.1f} W")

# %%
# Levels the dishwasher visits (rated 2000 W and 1200 W plus noise)
dw = house.appliances["dishwasher"].values
print(np.percentile(dw[dw > 10], [5, 50, 95]).round())

# %%
# Daily energy in kWh
per_day = agg.values.reshape(7, -1).mean(axis=1) * 24 / 1000
print(per_day.round(2))
