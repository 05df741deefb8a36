"""Household power time series: parsing, regularisation, subtraction and synthesis.

Values are watts. A :class:`RawSeries` holds meter readings at arbitrary
timestamps; a :class:`RegularSeries` holds readings on a fixed grid
``start + k * period``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

SECONDS_PER_DAY = 86400
DEFAULT_PERIOD = 6

TYPE_I = "TypeI"
TYPE_II = "TypeII"
TYPE_IV = "TypeIV"


class SeriesError(ValueError):
    pass


class MalformedLine(SeriesError):
    def __init__(self, line_no: int, text: str = ""):
        super().__init__(f"malformed sample on line {line_no}: {text!r}")
        self.line_no = line_no


class NonMonotonicTimestamp(SeriesError):
    def __init__(self, line_no: int):
        super().__init__(f"timestamp on line {line_no} does not increase")
        self.line_no = line_no


class BadWindow(SeriesError):
    pass


class GridMismatch(SeriesError):
    pass


class BadPeriod(SeriesError):
    pass


@dataclass
class RawSeries:
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.timestamps.shape != self.values.shape or self.timestamps.ndim != 1:
            raise SeriesError("timestamps and values must be 1-d and the same length")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise SeriesError("timestamps must be strictly increasing")
        if np.any(self.values < 0):
            raise SeriesError("power values must be non-negative")

    def __len__(self):
        return len(self.timestamps)

    def __eq__(self, other):
        if not isinstance(other, RawSeries):
            return NotImplemented
        return np.array_equal(self.timestamps, other.timestamps) and np.array_equal(
            self.values, other.values
        )


@dataclass
class RegularSeries:
    start: int
    period: int
    values: np.ndarray

    def __post_init__(self):
        self.start = int(self.start)
        self.period = int(self.period)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.period <= 0:
            raise SeriesError("period must be positive")
        if self.values.ndim != 1:
            raise SeriesError("values must be 1-d")
        if np.any(self.values < 0):
            raise SeriesError("power values must be non-negative")

    def __len__(self):
        return len(self.values)

    @property
    def end(self) -> int:
        """Exclusive end of the covered span, in epoch seconds."""
        return self.start + len(self.values) * self.period

    def timestamps(self) -> np.ndarray:
        return self.start + self.period * np.arange(len(self.values), dtype=np.int64)

    def same_grid(self, other: "RegularSeries") -> bool:
        return (
            self.start == other.start
            and self.period == other.period
            and len(self) == len(other)
        )

    def slice(self, t0: int, t1: int) -> "RegularSeries":
        """View of the samples in ``[t0, t1)``; both bounds must lie on the grid."""
        i0 = (t0 - self.start) // self.period
        i1 = (t1 - self.start) // self.period
        return RegularSeries(t0, self.period, self.values[i0:i1])

    def __eq__(self, other):
        if not isinstance(other, RegularSeries):
            return NotImplemented
        return self.same_grid(other) and np.array_equal(self.values, other.values)


@dataclass
class HouseRecording:
    aggregate: RegularSeries
    appliances: dict[str, RegularSeries] = field(default_factory=dict)

    def __post_init__(self):
        for name, series in self.appliances.items():
            if not self.aggregate.same_grid(series):
                raise GridMismatch(f"appliance {name!r} is not on the aggregate grid")

    def __eq__(self, other):
        if not isinstance(other, HouseRecording):
            return NotImplemented
        return (
            self.aggregate == other.aggregate
            and self.appliances.keys() == other.appliances.keys()
            and all(self.appliances[k] == other.appliances[k] for k in self.appliances)
        )


@dataclass
class Duty:
    """Activation schedule of a synthetic appliance.

    ``cycle_seconds`` is the compressor period for TypeIV appliances and the
    time spent in each state before moving to the next for TypeII ones.
    """

    events_per_day: float = 1.0
    mean_on_seconds: float = 3600.0
    cycle_seconds: float = 1800.0


@dataclass
class ApplianceModel:
    kind: str
    rated_watts: Sequence[float]
    duty: Duty = field(default_factory=Duty)
    noise_std: float = 0.0

    def __post_init__(self):
        self.rated_watts = tuple(float(w) for w in self.rated_watts)
        if self.kind not in (TYPE_I, TYPE_II, TYPE_IV):
            raise SeriesError(f"unknown appliance kind {self.kind!r}")
        expected_states = {TYPE_I: 1, TYPE_IV: 1}.get(self.kind)
        if expected_states is not None and len(self.rated_watts) != expected_states:
            raise SeriesError(f"{self.kind} takes exactly one rated power")
        if self.kind == TYPE_II and len(self.rated_watts) < 2:
            raise SeriesError("TypeII appliances need at least two states")
        if any(w <= 0 for w in self.rated_watts):
            raise SeriesError("rated powers must be positive")
        if self.noise_std < 0:
            raise SeriesError("noise_std must be non-negative")
        if self.duty.mean_on_seconds <= 0 or self.duty.cycle_seconds <= 0:
            raise SeriesError("duty durations must be positive")
        if self.duty.events_per_day < 0:
            raise SeriesError("events_per_day must be non-negative")


# Presets used by the command line and the demos.
PRESETS = {
    "tv": ApplianceModel(TYPE_I, [120.0], Duty(0.7, 7200.0, 1800.0), noise_std=3.0),
    "dishwasher": ApplianceModel(
        TYPE_II, [2000.0, 1200.0], Duty(0.6, 5400.0, 900.0), noise_std=10.0
    ),
    "fridge": ApplianceModel(TYPE_IV, [90.0], Duty(1.0, 900.0, 2700.0), noise_std=2.0),
}


def parse_channel(lines: Iterable[str] | str) -> RawSeries:
    """Read a ``<epoch seconds> <watts>`` channel stream into a RawSeries."""
    if isinstance(lines, str):
        lines = io.StringIO(lines)
    timestamps: list[int] = []
    values: list[float] = []
    for line_no, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) != 2:
            raise MalformedLine(line_no, line)
        try:
            ts = int(parts[0])
            value = float(parts[1])
        except ValueError:
            raise MalformedLine(line_no, line) from None
        if not np.isfinite(value) or value < 0:
            raise MalformedLine(line_no, line)
        if timestamps and ts <= timestamps[-1]:
            raise NonMonotonicTimestamp(line_no)
        timestamps.append(ts)
        values.append(value)
    return RawSeries(np.array(timestamps, dtype=np.int64), np.array(values, dtype=np.float64))


def serialize_channel(raw: RawSeries) -> str:
    # repr() gives the shortest string that parses back to the same double
    return "".join(f"{int(t)} {float(v)!r}\n" for t, v in zip(raw.timestamps, raw.values))


def read_channel_file(path) -> RawSeries:
    with open(path, encoding="ascii") as fh:
        return parse_channel(fh)


def write_channel_file(path, series: RawSeries | RegularSeries) -> None:
    if isinstance(series, RegularSeries):
        series = RawSeries(series.timestamps(), series.values)
    Path(path).write_text(serialize_channel(series), encoding="ascii")


def parse_labels(text: str) -> dict[int, str]:
    """Parse a labels file (``<channel number> <appliance name>`` per line)."""
    labels = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(" ", 1)
        if len(parts) != 2 or not parts[1].strip():
            raise MalformedLine(line_no, line)
        try:
            labels[int(parts[0])] = parts[1].strip()
        except ValueError:
            raise MalformedLine(line_no, line) from None
    return labels


def resample(raw: RawSeries, period: int, window_start: int, window_end: int) -> RegularSeries:
    """Forward-fill ``raw`` onto the grid ``window_start + k * period``.

    Slots before the first raw sample are zero.
    """
    if period <= 0 or window_end <= window_start or (window_end - window_start) % period:
        raise BadWindow(
            f"span [{window_start}, {window_end}) is not a positive multiple of {period}"
        )
    grid = np.arange(window_start, window_end, period, dtype=np.int64)
    idx = np.searchsorted(raw.timestamps, grid, side="right") - 1
    values = np.zeros(len(grid), dtype=np.float64)
    seen = idx >= 0
    values[seen] = raw.values[idx[seen]]
    return RegularSeries(window_start, period, values)


def subtract_appliance(aggregate: RegularSeries, appliance: RegularSeries) -> RegularSeries:
    """Remove an appliance channel from the aggregate, clamping at zero."""
    if not aggregate.same_grid(appliance):
        raise GridMismatch("aggregate and appliance series are on different grids")
    values = np.maximum(aggregate.values - appliance.values, 0.0)
    return RegularSeries(aggregate.start, aggregate.period, values)


def _intervals(rng: np.random.Generator, duty: Duty, total_seconds: int):
    days = total_seconds / SECONDS_PER_DAY
    n_events = rng.poisson(duty.events_per_day * days)
    starts = np.sort(rng.uniform(0, total_seconds, size=n_events))
    durations = rng.exponential(duty.mean_on_seconds, size=n_events)
    return starts, durations


def _appliance_channel(model: ApplianceModel, n: int, period: int, rng) -> np.ndarray:
    t = np.arange(n, dtype=np.float64) * period
    out = np.zeros(n, dtype=np.float64)
    duty = model.duty
    if model.kind == TYPE_IV:
        phase = rng.uniform(0, duty.cycle_seconds)
        on_fraction = min(duty.mean_on_seconds / duty.cycle_seconds, 1.0)
        on = np.mod(t + phase, duty.cycle_seconds) < on_fraction * duty.cycle_seconds
        out[on] = model.rated_watts[0]
    else:
        states = np.asarray(model.rated_watts)
        for t0, dur in zip(*_intervals(rng, duty, n * period)):
            i0 = int(np.ceil(t0 / period))
            i1 = min(n, int(np.ceil((t0 + dur) / period)))
            if i1 <= i0:
                continue
            if model.kind == TYPE_I:
                out[i0:i1] = np.maximum(out[i0:i1], states[0])
            else:
                elapsed = t[i0:i1] - t0
                state = (elapsed // duty.cycle_seconds).astype(np.int64) % len(states)
                out[i0:i1] = np.maximum(out[i0:i1], states[state])
    if model.noise_std > 0:
        on = out > 0
        out[on] = np.maximum(out[on] + rng.normal(0.0, model.noise_std, on.sum()), 0.0)
    return out


def synth_house(
    models: Mapping[str, ApplianceModel] | Sequence[tuple[str, ApplianceModel]],
    base_load: float,
    days: int,
    period: int = DEFAULT_PERIOD,
    seed: int = 0,
    noise_std: float = 0.0,
    start: int = 0,
) -> HouseRecording:
    """Generate a synthetic house: base load plus appliance channels plus noise.

    Each appliance draws from its own child stream of ``seed`` so adding an
    appliance does not perturb the others.
    """
    if days < 1:
        raise SeriesError("days must be at least 1")
    if period <= 0 or SECONDS_PER_DAY % period:
        raise BadPeriod(f"period {period} does not divide a day")
    if base_load < 0 or noise_std < 0:
        raise SeriesError("base_load and noise_std must be non-negative")
    items = list(models.items()) if isinstance(models, Mapping) else list(models)

    n = days * SECONDS_PER_DAY // period
    root = np.random.SeedSequence(seed)
    noise_seq, *app_seqs = root.spawn(len(items) + 1)

    appliances = {}
    total = np.full(n, float(base_load))
    for (name, model), seq in zip(items, app_seqs):
        channel = _appliance_channel(model, n, period, np.random.default_rng(seq))
        appliances[name] = RegularSeries(start, period, channel)
        total += channel
    if noise_std > 0:
        total = np.maximum(total + np.random.default_rng(noise_seq).normal(0, noise_std, n), 0.0)
    return HouseRecording(RegularSeries(start, period, total), appliances)


def load_house(directory, period: int = DEFAULT_PERIOD) -> HouseRecording:
    """Load a UK-Dale style house directory (``labels.dat`` + ``channel_N.dat``).

    The channel labelled ``aggregate`` (or ``mains``) is the aggregate. All
    channels are resampled onto one whole-day grid covering the aggregate.
    """
    directory = Path(directory)
    labels = parse_labels((directory / "labels.dat").read_text(encoding="utf-8"))
    raws = {name: read_channel_file(directory / f"channel_{ch}.dat") for ch, name in labels.items()}
    agg_name = next((n for n in ("aggregate", "mains") if n in raws), None)
    if agg_name is None:
        raise SeriesError(f"{directory} has no aggregate/mains channel")
    agg_raw = raws.pop(agg_name)
    if len(agg_raw) == 0:
        raise SeriesError("aggregate channel is empty")
    t0 = int(agg_raw.timestamps[0]) // SECONDS_PER_DAY * SECONDS_PER_DAY
    t1 = -(-(int(agg_raw.timestamps[-1]) + 1) // SECONDS_PER_DAY) * SECONDS_PER_DAY
    aggregate = resample(agg_raw, period, t0, t1)
    appliances = {name: resample(raw, period, t0, t1) for name, raw in raws.items()}
    return HouseRecording(aggregate, appliances)


def save_house(directory, house: HouseRecording) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = ["aggregate", *house.appliances]
    (directory / "labels.dat").write_text(
        "".join(f"{i} {name}\n" for i, name in enumerate(names, start=1)), encoding="utf-8"
    )
    write_channel_file(directory / "channel_1.dat", house.aggregate)
    for i, name in enumerate(house.appliances, start=2):
        write_channel_file(directory / f"channel_{i}.dat", house.appliances[name])
