# %% [markdown]
# # Training the presence classifier
# 200 synthetic days, 64x64 inputs, 30 epochs. Takes a minute or two on one core.

# %%
import numpy as np

from imgnilm.dataset import ActivityRule, SplitSpec, build_classes, resize_nearest, stratified_split
from imgnilm.heatmap import HeatmapSpec
from imgnilm.nn import NetworkConfig
from imgnilm.series import PRESETS, synth_house
from imgnilm.trainer import TrainConfig, evaluate, format_history, images_to_input, train

house = synth_house({"dishwasher": PRESETS["dishwasher"]}, 300.0, 200, 6, seed=42, noise_std=30.0)
images = build_classes(house, "dishwasher", HeatmapSpec(), ActivityRule())
manifest = stratified_split(images, SplitSpec(seed=42))
print(len(images), manifest.counts())

# %%
def subset(split):
    picked = [(img, e) for img, e in zip(images, manifest.entries) if e.split == split]
    x = images_to_input(np.stack([resize_nearest(img.image, 64) for img, _ in picked]))
    y = np.array([int(e.label == "classII") for _, e in picked])
    return x, y

train_set, val_set, test_set = subset("train"), subset("val"), subset("test")

# %%
net, history = train(NetworkConfig(input_side=64), TrainConfig(epochs=30, batch_size=32, lr=1e-4, seed=42),
                     train_set, val_set)
print(format_history(history[-5:]))

# %%
m = evaluate(net, *test_set)
print(m, m.accuracy)
