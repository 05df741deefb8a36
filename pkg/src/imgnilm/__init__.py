"""Appliance detection from household power data rendered as heatmaps."""
from .series import (
    ApplianceModel,
    Duty,
    HouseRecording,
    RawSeries,
    RegularSeries,
    parse_channel,
    resample,
    subtract_appliance,
    synth_house,
)
from .heatmap import HeatmapSpec, encode_window, read_png, slice_windows, write_png
from .dataset import ActivityRule, SplitSpec, build_classes, resize_nearest, stratified_split
from .nn import Network, NetworkConfig, grad_check
from .trainer import TrainConfig, evaluate, load_checkpoint, predict, save_checkpoint, train

__version__ = "0.1.0"
