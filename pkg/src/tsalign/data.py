"""CSV ingestion, chronological splits, sliding windows, and synthetic series.

All functions here are pure: they take immutable inputs and return fresh
objects, so they are safe to call concurrently. Values are kept as float64
numpy arrays; timestamps are int64 epoch seconds, timezone-naive and treated
as UTC.
"""

from __future__ import annotations

import calendar
import csv
import hashlib
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"


class DataError(ValueError):
    """Invalid series, split, or file contents."""


class CsvFormatError(DataError):
    """Malformed input CSV; carries the offending file row when known."""

    def __init__(self, message: str, row: int | None = None):
        if row is not None:
            message = f"{message} (row {row})"
        super().__init__(message)
        self.row = row


@dataclass(frozen=True)
class RawSeries:
    """Evenly sampled multivariate series.

    ``timestamps`` has shape (T,), ``values`` shape (T, C). Timestamps must be
    strictly increasing and spaced exactly ``sampling_interval`` seconds apart.
    """

    timestamps: np.ndarray
    values: np.ndarray
    feature_names: tuple[str, ...]
    sampling_interval: int

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise DataError(f"values must be 2-D (T, C), got shape {vals.shape}")
        if ts.ndim != 1 or ts.shape[0] != vals.shape[0]:
            raise DataError("timestamps and values row counts differ")
        if ts.shape[0] < 1 or vals.shape[1] < 1:
            raise DataError("series needs at least one row and one channel")
        if len(self.feature_names) != vals.shape[1]:
            raise DataError("feature_names length must equal channel count")
        if self.sampling_interval <= 0:
            raise DataError("sampling_interval must be positive")
        if ts.shape[0] > 1:
            deltas = np.diff(ts)
            if np.any(deltas <= 0):
                raise DataError("timestamps must be strictly increasing")
            if np.any(deltas != self.sampling_interval):
                raise DataError("timestamps must be evenly spaced by sampling_interval")
        if not np.all(np.isfinite(vals)):
            raise DataError("values must be finite")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "RawSeries":
        return RawSeries(
            timestamps=self.timestamps[start:stop].copy(),
            values=self.values[start:stop].copy(),
            feature_names=self.feature_names,
            sampling_interval=self.sampling_interval,
        )


@dataclass(frozen=True)
class SplitSpec:
    """Chronological split ratios plus the few-shot training fraction."""

    train_ratio: float = 0.7
    val_ratio: float = 0.1
    test_ratio: float = 0.2
    few_shot_fraction: float = 1.0

    def __post_init__(self):
        for name in ("train_ratio", "val_ratio", "test_ratio"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be >= 0")
        total = self.train_ratio + self.val_ratio + self.test_ratio
        if abs(total - 1.0) > 1e-9:
            raise DataError(f"split ratios must sum to 1, got {total}")
        if not (0.0 < self.few_shot_fraction <= 1.0):
            raise DataError("few_shot_fraction must be in (0, 1]")


@dataclass(frozen=True)
class Window:
    """One look-back/horizon pair cut from a source series."""

    x_in: np.ndarray
    x_out: np.ndarray
    in_timestamps: np.ndarray
    start_index: int

    @property
    def t_in(self) -> int:
        return self.x_in.shape[0]

    @property
    def t_out(self) -> int:
        return self.x_out.shape[0]


@dataclass(frozen=True)
class SynthComponent:
    kind: str  # "sine" | "trend" | "noise"
    amplitude: float = 1.0
    period_steps: int = 24  # sine only
    slope: float = 0.0  # trend only
    sigma: float = 1.0  # noise only

    def __post_init__(self):
        if self.kind not in ("sine", "trend", "noise"):
            raise DataError(f"unknown component kind {self.kind!r}")
        if self.kind == "sine" and self.period_steps < 2:
            raise DataError("sine period_steps must be >= 2")


@dataclass(frozen=True)
class SynthSpec:
    length: int
    components: tuple[SynthComponent, ...]
    channels: int = 1
    seed: int = 0
    start_timestamp: int = 1467331200  # 2016-07-01 00:00:00
    sampling_interval: int = 3600

    def __post_init__(self):
        if self.length < 1:
            raise DataError("length must be >= 1")
        if self.channels < 1:
            raise DataError("channels must be >= 1")
        if self.sampling_interval <= 0:
            raise DataError("sampling_interval must be positive")
        object.__setattr__(self, "components", tuple(self.components))


@dataclass(frozen=True)
class Scaler:
    """Per-channel standardization statistics, fitted on a training split."""

    mean: np.ndarray
    std: np.ndarray


def parse_timestamp(text: str) -> int:
    """Parse ``YYYY-MM-DD HH:MM:SS`` into epoch seconds (naive, UTC)."""
    dt = datetime.strptime(text, TIMESTAMP_FORMAT)
    return int(calendar.timegm(dt.timetuple()))


def format_timestamp(epoch_seconds: int) -> str:
    dt = datetime.fromtimestamp(int(epoch_seconds), tz=timezone.utc)
    return dt.strftime(TIMESTAMP_FORMAT)


def load_csv(path: str | Path) -> RawSeries:
    """Load a ``date,value,...`` CSV into a :class:`RawSeries`.

    The first header cell must be ``date`` and every date cell must parse as
    ``YYYY-MM-DD HH:MM:SS``. The sampling interval is inferred from the first
    two data rows and every later row must keep the same spacing. Errors name
    the offending file row (the header is row 1).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such data file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError("empty file", row=1) from None
        if not header or header[0].strip() != "date":
            raise CsvFormatError('first header cell must be "date"', row=1)
        names = tuple(name.strip() for name in header[1:])
        if not names:
            raise CsvFormatError("no value columns after the date column", row=1)
        timestamps: list[int] = []
        rows: list[list[float]] = []
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise CsvFormatError(
                    f"expected {len(header)} cells, found {len(row)}", row=row_no
                )
            try:
                ts = parse_timestamp(row[0])
            except ValueError:
                raise CsvFormatError(f"invalid date cell {row[0]!r}", row=row_no) from None
            try:
                values = [float(cell) for cell in row[1:]]
            except ValueError:
                raise CsvFormatError("non-numeric value cell", row=row_no) from None
            if not all(np.isfinite(values)):
                raise CsvFormatError("non-finite value cell", row=row_no)
            timestamps.append(ts)
            rows.append(values)
    if len(rows) < 2:
        raise CsvFormatError("need at least two data rows to infer the sampling interval")
    interval = timestamps[1] - timestamps[0]
    for i in range(1, len(timestamps)):
        delta = timestamps[i] - timestamps[i - 1]
        if delta <= 0:
            raise CsvFormatError("timestamps must be strictly increasing", row=i + 2)
        if delta != interval:
            raise CsvFormatError(
                f"uneven timestamp spacing: expected {interval}s, found {delta}s",
                row=i + 2,
            )
    return RawSeries(
        timestamps=np.asarray(timestamps, dtype=np.int64),
        values=np.asarray(rows, dtype=np.float64),
        feature_names=names,
        sampling_interval=int(interval),
    )


def save_csv(series: RawSeries, path: str | Path) -> Path:
    """Write a series in the same CSV format accepted by :func:`load_csv`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", *series.feature_names])
        for ts, row in zip(series.timestamps, series.values):
            writer.writerow([format_timestamp(ts), *(repr(float(v)) for v in row)])
    return path


def chronological_split(
    series: RawSeries, spec: SplitSpec
) -> tuple[RawSeries, RawSeries, RawSeries]:
    """Split into contiguous train/val/test segments.

    Lengths are floor(T * train_ratio) and floor(T * val_ratio), with the
    remainder going to test.
    """
    t = series.length
    if t < 3:
        raise DataError(f"series too short to split: T={t}")
    n_train = int(t * spec.train_ratio)
    n_val = int(t * spec.val_ratio)
    n_test = t - n_train - n_val
    if n_train < 1 or n_val < 1 or n_test < 1:
        raise DataError(
            f"empty split segment: train={n_train}, val={n_val}, test={n_test}"
        )
    return (
        series.slice(0, n_train),
        series.slice(n_train, n_train + n_val),
        series.slice(n_train + n_val, t),
    )


def few_shot_prefix(train: RawSeries, fraction: float) -> RawSeries:
    """Keep the first floor(T * fraction) rows of the training split."""
    if not (0.0 < fraction <= 1.0):
        raise DataError("fraction must be in (0, 1]")
    n = int(train.length * fraction)
    if n < 1:
        raise DataError(f"few-shot prefix would be empty (T={train.length}, fraction={fraction})")
    if n == train.length:
        return train
    return train.slice(0, n)


def sliding_windows(series: RawSeries, t_in: int, t_out: int) -> list[Window]:
    """All stride-1 windows of total length ``t_in + t_out``.

    ``t_out`` may be 0 for self-supervised uses that only need the look-back
    part. Exactly ``T - (t_in + t_out) + 1`` windows are produced.
    """
    if t_in < 1 or t_out < 0:
        raise DataError("t_in must be >= 1 and t_out >= 0")
    total = t_in + t_out
    if series.length < total:
        raise DataError(
            f"series too short: T={series.length} < t_in + t_out = {total}"
        )
    windows = []
    for k in range(series.length - total + 1):
        windows.append(
            Window(
                x_in=series.values[k : k + t_in],
                x_out=series.values[k + t_in : k + total],
                in_timestamps=series.timestamps[k : k + t_in],
                start_index=k,
            )
        )
    return windows


def _component_seed(seed: int, component: SynthComponent) -> int:
    # Seed depends only on the base seed and the component's own parameters,
    # so a multi-component series is the exact sum of its single-component
    # counterparts.
    key = (
        f"{seed}|{component.kind}|{component.amplitude!r}|"
        f"{component.period_steps}|{component.slope!r}|{component.sigma!r}"
    )
    digest = hashlib.sha256(key.encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _component_values(spec: SynthSpec, component: SynthComponent) -> np.ndarray:
    t = np.arange(spec.length, dtype=np.float64)[:, None]
    c = np.arange(spec.channels, dtype=np.float64)[None, :]
    if component.kind == "sine":
        phase = np.pi * c / spec.channels  # spread channels across half a cycle
        return component.amplitude * np.sin(
            2.0 * np.pi * t / component.period_steps + phase
        )
    if component.kind == "trend":
        return np.broadcast_to(component.slope * t, (spec.length, spec.channels)).copy()
    rng = np.random.default_rng(_component_seed(spec.seed, component))
    return component.sigma * rng.standard_normal((spec.length, spec.channels))


def generate_synthetic(spec: SynthSpec) -> RawSeries:
    """Deterministic synthetic series: the elementwise sum of its components."""
    values = np.zeros((spec.length, spec.channels), dtype=np.float64)
    for component in spec.components:
        values += _component_values(spec, component)
    timestamps = spec.start_timestamp + spec.sampling_interval * np.arange(
        spec.length, dtype=np.int64
    )
    names = tuple(f"ch{i}" for i in range(spec.channels))
    return RawSeries(
        timestamps=timestamps,
        values=values,
        feature_names=names,
        sampling_interval=spec.sampling_interval,
    )


_SCALER_EPS = 1e-8


def fit_scaler(train: RawSeries) -> Scaler:
    """Per-channel mean/std (population definition) of the training split.

    Channels with std below 1e-8 trigger a warning and get the epsilon
    substituted, which maps a constant channel to all zeros.
    """
    mean = train.values.mean(axis=0)
    std = train.values.std(axis=0)
    degenerate = std < _SCALER_EPS
    if np.any(degenerate):
        names = [train.feature_names[i] for i in np.nonzero(degenerate)[0]]
        warnings.warn(f"constant channel(s) {names}; scaling with epsilon std")
        std = np.where(degenerate, _SCALER_EPS, std)
    return Scaler(mean=mean, std=std)


def apply_scaler(series: RawSeries, scaler: Scaler) -> RawSeries:
    return RawSeries(
        timestamps=series.timestamps.copy(),
        values=(series.values - scaler.mean) / scaler.std,
        feature_names=series.feature_names,
        sampling_interval=series.sampling_interval,
    )


def invert_scaler(values: np.ndarray, scaler: Scaler) -> np.ndarray:
    return values * scaler.std + scaler.mean


@dataclass(frozen=True)
class PreparedData:
    """Scaled chronological splits ready for windowing."""

    train: RawSeries
    val: RawSeries
    test: RawSeries
    scaler: Scaler
    train_rows: int = field(default=0)

    @property
    def channels(self) -> int:
        return self.train.channels


def prepare_splits(series: RawSeries, spec: SplitSpec) -> PreparedData:
    """Split, apply the few-shot prefix, and standardize with train statistics.

    The scaler is fitted on the (possibly few-shot-restricted) training rows,
    i.e. on the data the model actually sees, and applied to all three splits.
    """
    train, val, test = chronological_split(series, spec)
    if spec.few_shot_fraction < 1.0:
        train = few_shot_prefix(train, spec.few_shot_fraction)
    scaler = fit_scaler(train)
    return PreparedData(
        train=apply_scaler(train, scaler),
        val=apply_scaler(val, scaler),
        test=apply_scaler(test, scaler),
        scaler=scaler,
        train_rows=train.length,
    )
