"""Labelled heatmap datasets: class construction, resizing and splitting.

Class I images lack the target appliance (it was subtracted from the
aggregate); Class II images are the raw aggregate on days the appliance ran.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from fractions import Fraction
from pathlib import Path

import numpy as np

from .heatmap import HeatmapSpec, aggregate_window, encode_window, slice_windows, write_png
from .series import HouseRecording, RegularSeries, subtract_appliance

CLASS_I = "classI"
CLASS_II = "classII"
LABELS = (CLASS_I, CLASS_II)
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


class UnknownAppliance(DatasetError):
    pass


class EmptyClass(DatasetError):
    pass


@dataclass(frozen=True)
class ActivityRule:
    on_threshold: float = 10.0
    min_consecutive: int = 5

    def __post_init__(self):
        if not self.on_threshold > 0 or self.min_consecutive < 1:
            raise DatasetError("on_threshold must be > 0 and min_consecutive >= 1")


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.20
    val_fraction_of_train: float = 0.20
    seed: int = 0

    def __post_init__(self):
        for f in (self.test_fraction, self.val_fraction_of_train):
            if not 0 < f < 1:
                raise DatasetError("split fractions must lie in (0, 1)")


@dataclass
class LabeledImage:
    image: np.ndarray
    label: str
    house: str
    appliance: str
    window_start: int

    @property
    def filename(self) -> str:
        return f"{self.house}_{self.appliance}_{self.label}_{self.window_start}.png"


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    house: str
    appliance: str
    window_start: int
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict[tuple[str, str], int]:
        out: dict[tuple[str, str], int] = {}
        for e in self.entries:
            out[(e.label, e.split)] = out.get((e.label, e.split), 0) + 1
        return out

    def dumps(self) -> str:
        return "".join(json.dumps(asdict(e), sort_keys=True) + "\n" for e in self.entries)

    @classmethod
    def loads(cls, text: str) -> "DatasetManifest":
        entries = []
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                entries.append(ManifestEntry(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise DatasetError(f"bad manifest record on line {line_no}: {exc}") from None
        return cls(entries)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _longest_run(mask: np.ndarray) -> int:
    if not mask.any():
        return 0
    padded = np.concatenate(([0], mask.astype(np.int8), [0]))
    edges = np.flatnonzero(np.diff(padded))
    return int((edges[1::2] - edges[0::2]).max())


def appliance_active(window: RegularSeries, spec: HeatmapSpec, rule: ActivityRule) -> bool:
    """True if the pixel-averaged appliance power stays above the threshold
    for ``rule.min_consecutive`` consecutive pixels (in chronological order)."""
    grid = aggregate_window(window, spec)
    chronological = grid.T.ravel()
    return _longest_run(chronological > rule.on_threshold) >= rule.min_consecutive


def build_classes(
    house: HouseRecording,
    appliance: str,
    spec: HeatmapSpec,
    rule: ActivityRule = ActivityRule(),
    stride: int = 86400,
    house_id: str = "house",
    include_inactive: bool = False,
) -> list[LabeledImage]:
    """Encode every window as a Class I / Class II pair when the appliance is on.

    With ``include_inactive`` inactive windows are also emitted as extra
    Class I images (aggregate minus whatever the appliance drew).
    """
    if appliance not in house.appliances:
        raise UnknownAppliance(f"{appliance!r} not in house (have {sorted(house.appliances)})")
    channel = house.appliances[appliance]
    out = []
    agg_windows = slice_windows(house.aggregate, spec, stride)
    app_windows = slice_windows(channel, spec, stride)
    for agg, app in zip(agg_windows, app_windows):
        if appliance_active(app, spec, rule):
            without = encode_window(subtract_appliance(agg, app), spec)
            out.append(LabeledImage(without, CLASS_I, house_id, appliance, agg.start))
            out.append(LabeledImage(encode_window(agg, spec), CLASS_II, house_id, appliance, agg.start))
        elif include_inactive:
            without = encode_window(subtract_appliance(agg, app), spec)
            out.append(LabeledImage(without, CLASS_I, house_id, appliance, agg.start))
    return out


def resize_nearest(image: np.ndarray, side: int) -> np.ndarray:
    image = np.asarray(image)
    if side < 1 or image.ndim < 2 or image.shape[0] == 0 or image.shape[1] == 0:
        raise DatasetError("resize needs side >= 1 and a non-empty image")
    h, w = image.shape[:2]
    rows = np.arange(side) * h // side
    cols = np.arange(side) * w // side
    return image[rows[:, None], cols[None, :]]


def stratified_split(images: list[LabeledImage], spec: SplitSpec) -> DatasetManifest:
    """Shuffle each class with its own seeded stream and carve test/val/train.

    Counts are floored; the remainder goes to train. Entries keep emission
    order, only the ``split`` field is assigned.
    """
    by_class = {label: [i for i, img in enumerate(images) if img.label == label] for label in LABELS}
    for label, idx in by_class.items():
        if not idx:
            raise EmptyClass(f"no {label} images")
    # exact ratios so e.g. 0.7 does not floor one image short
    test_frac = Fraction(spec.test_fraction).limit_denominator(10**6)
    val_frac = Fraction(spec.val_fraction_of_train).limit_denominator(10**6)
    assigned: dict[int, str] = {}
    for class_no, label in enumerate(LABELS):
        idx = np.array(by_class[label])
        order = idx[np.random.default_rng([spec.seed, class_no]).permutation(len(idx))]
        n_test = math.floor(len(idx) * test_frac)
        remaining = len(idx) - n_test
        n_val = math.floor(remaining * val_frac)
        test = order[remaining:]
        val = order[remaining - n_val:remaining]
        train = order[: remaining - n_val]
        for group, name in ((train, "train"), (val, "val"), (test, "test")):
            for i in group:
                assigned[int(i)] = name
    entries = [
        ManifestEntry(img.filename, img.label, img.house, img.appliance, int(img.window_start), assigned[i])
        for i, img in enumerate(images)
    ]
    if len({e.path for e in entries}) != len(entries):
        raise DatasetError("duplicate image paths in dataset")
    return DatasetManifest(entries)


def write_dataset(images: list[LabeledImage], manifest: DatasetManifest, out_dir, side: int | None = None):
    """Write the images as PNGs under ``out_dir`` and the manifest next to them."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for img, entry in zip(images, manifest.entries):
        pixels = img.image if side is None else resize_nearest(img.image, side)
        write_png(pixels, out_dir / entry.path)
    manifest.save(out_dir / "manifest.jsonl")
    return out_dir / "manifest.jsonl"
