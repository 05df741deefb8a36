"""Encode a window of power readings as a colour heatmap.

Layout: one column per hour (left to right), rows run through the hour from
top to bottom, each pixel the mean power over ``step_seconds``. Values are
z-scored within the window and mapped through a piecewise-linear colormap
(dark blue, light blue, red).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .series import RegularSeries

SECONDS_PER_HOUR = 3600

DEFAULT_COLORMAP = (
    (0.0, (0, 0, 139)),
    (0.5, (173, 216, 230)),
    (1.0, (255, 0, 0)),
)


class HeatmapError(ValueError):
    pass


class StepMismatch(HeatmapError):
    pass


class DecodeError(HeatmapError):
    pass


class UnsupportedFormat(HeatmapError):
    pass


@dataclass(frozen=True)
class HeatmapSpec:
    window_hours: int = 24
    step_seconds: int = 6
    z_clamp: float = 3.0
    colormap: tuple = field(default=DEFAULT_COLORMAP)

    def __post_init__(self):
        if self.window_hours <= 0:
            raise HeatmapError("window_hours must be positive")
        if self.step_seconds <= 0 or SECONDS_PER_HOUR % self.step_seconds:
            raise HeatmapError(f"step_seconds={self.step_seconds} must divide 3600")
        if not self.z_clamp > 0:
            raise HeatmapError("z_clamp must be positive")
        ts = [t for t, _ in self.colormap]
        if len(ts) < 2 or ts[0] != 0.0 or ts[-1] != 1.0 or any(b <= a for a, b in zip(ts, ts[1:])):
            raise HeatmapError("colormap stops must increase strictly from 0 to 1")
        for _, rgb in self.colormap:
            if len(rgb) != 3 or any(not 0 <= c <= 255 for c in rgb):
                raise HeatmapError("colormap colours must be three bytes")

    @property
    def rows(self) -> int:
        return SECONDS_PER_HOUR // self.step_seconds

    @property
    def cols(self) -> int:
        return self.window_hours

    @property
    def window_seconds(self) -> int:
        return self.window_hours * SECONDS_PER_HOUR


def slice_windows(series: RegularSeries, spec: HeatmapSpec, stride: int) -> list[RegularSeries]:
    """All complete windows starting at ``series.start + k * stride``."""
    if stride <= 0 or stride % series.period:
        raise HeatmapError(f"stride {stride} must be a positive multiple of {series.period}")
    if spec.window_seconds % series.period:
        raise HeatmapError("window length is not a whole number of samples")
    windows = []
    t = series.start
    while t + spec.window_seconds <= series.end:
        windows.append(series.slice(t, t + spec.window_seconds))
        t += stride
    return windows


def aggregate_window(window: RegularSeries, spec: HeatmapSpec) -> np.ndarray:
    """Mean power per pixel, as a ``(rows, cols)`` float grid."""
    if spec.step_seconds % window.period:
        raise StepMismatch(
            f"step {spec.step_seconds}s is not a multiple of the {window.period}s period"
        )
    per_step = spec.step_seconds // window.period
    expected = spec.window_seconds // window.period
    if len(window) != expected:
        raise HeatmapError(f"window has {len(window)} samples, expected {expected}")
    steps = window.values.reshape(spec.cols, spec.rows, per_step).mean(axis=2)
    return np.ascontiguousarray(steps.T)


def zscore_normalize(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    std = grid.std()
    if std == 0 or not np.isfinite(std):
        return np.zeros_like(grid)
    return (grid - grid.mean()) / std


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def colorize(z: np.ndarray, spec: HeatmapSpec) -> np.ndarray:
    """Map z-scores to an ``(rows, cols, 3)`` uint8 image."""
    z = np.clip(np.asarray(z, dtype=np.float64), -spec.z_clamp, spec.z_clamp)
    t = (z + spec.z_clamp) / (2 * spec.z_clamp)
    stops = np.array([s for s, _ in spec.colormap], dtype=np.float64)
    colors = np.array([c for _, c in spec.colormap], dtype=np.float64)
    out = np.empty(z.shape + (3,), dtype=np.uint8)
    for ch in range(3):
        out[..., ch] = _round_half_away(np.interp(t, stops, colors[:, ch]))
    return out


def encode_window(window: RegularSeries, spec: HeatmapSpec) -> np.ndarray:
    return colorize(zscore_normalize(aggregate_window(window, spec)), spec)


def heatmap_filename(house: str, appliance: str, label: str, window_start: int) -> str:
    return f"{house}_{appliance}_{label}_{int(window_start)}.png"


def write_png(image: np.ndarray, sink) -> None:
    """Write an ``(H, W, 3)`` uint8 array as a non-interlaced 8-bit RGB PNG."""
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3 or image.size == 0:
        raise HeatmapError("expected a non-empty (H, W, 3) uint8 image")
    if isinstance(sink, (str, Path)):
        Path(sink).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(sink, format="PNG")


def read_png(source) -> np.ndarray:
    try:
        with Image.open(source) as img:
            if img.format != "PNG":
                raise UnsupportedFormat(f"not a PNG file ({img.format})")
            if img.mode != "RGB":
                raise UnsupportedFormat(f"expected 8-bit RGB, got mode {img.mode}")
            img.load()
            return np.array(img, dtype=np.uint8)
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, HeatmapError):
            raise
        raise DecodeError(str(exc)) from exc
