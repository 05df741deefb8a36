# %% [markdown]
# # Days as heatmaps
# Each column is an hour, each row a 6 s step inside that hour.

# %%
import numpy as np

from imgnilm.dataset import ActivityRule, build_classes
from imgnilm.heatmap import HeatmapSpec, aggregate_window, encode_window, slice_windows, write_png
from imgnilm.series import PRESETS, RegularSeries, synth_house

house = synth_house({"dishwasher": PRESETS["dishwasher"]}, 300.0, 10, 6, seed=1, noise_std=30.0)
spec = HeatmapSpec(window_hours=24, step_seconds=6)
day0 = slice_windows(house.aggregate, spec, 86400)[0]
grid = aggregate_window(day0, spec)
grid.shape  # (600, 24)

# %%
img = encode_window(day0, spec)
img.shape, img.dtype

# %%
# Scale and offset do not change the picture
scaled = RegularSeries(day0.start, day0.period, 3.5 * day0.values + 120)
np.array_equal(encode_window(scaled, spec), img)

# %%
# Coarser steps give fewer rows
for s in (5, 10, 60):
    print(s, HeatmapSpec(step_seconds=s).rows)

# %%
# Class II keeps the dishwasher, Class I has it subtracted
images = build_classes(house, "dishwasher", spec, ActivityRule(), house_id="demo")
print([(i.label, i.window_start // 86400) for i in images])
for i in images[:2]:
    write_png(i.image, "/tmp/" + i.filename)
