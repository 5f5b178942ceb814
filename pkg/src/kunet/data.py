"""CSV ingestion, chronological splits and sliding windows."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError, IngestError
from .normalize import NormState

ETT_COLUMNS = ("HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT")
_MISSING = {"", "nan", "NaN", "NA", "null"}
_MONTH_DAYS = 30


@dataclass
class IngestReport:
    path: str
    rows: int = 0
    channels: int = 0
    rejected_rows: list[int] = field(default_factory=list)
    filled_cells: int = 0

    def to_text(self) -> str:
        rejected = ",".join(str(r) for r in self.rejected_rows) or "-"
        return (f"path = {self.path}\nrows = {self.rows}\nchannels = {self.channels}\n"
                f"rejected_rows = {len(self.rejected_rows)}\nrejected_lines = {rejected}\n"
                f"filled_cells = {self.filled_cells}\n")


@dataclass(frozen=True)
class SeriesTable:
    timestamps: np.ndarray
    values: np.ndarray
    channels: tuple[str, ...]
    report: IngestReport | None = None

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def select(self, columns=None, rows: int | None = None) -> "SeriesTable":
        """Keep the named columns (all when ``None``) and the first ``rows`` rows."""
        if columns is None:
            idx = list(range(self.n_channels))
        else:
            missing = [c for c in columns if c not in self.channels]
            if missing:
                raise DataError(f"unknown columns {missing}; available {list(self.channels)}")
            idx = [self.channels.index(c) for c in columns]
        stop = self.n_rows if not rows else min(rows, self.n_rows)
        return SeriesTable(self.timestamps[:stop], self.values[:stop, idx],
                           tuple(self.channels[i] for i in idx), self.report)


@dataclass
class IngestConfig:
    missing: str = "reject"          # "reject" drops rows with gaps, "ffill" repeats the previous row's value
    columns: tuple[str, ...] | None = None
    max_rows: int | None = None


def _parse_time(text: str) -> np.datetime64:
    return np.datetime64(datetime.fromisoformat(text.strip()), "s")


def load_csv(path: str | Path, config: IngestConfig | None = None) -> SeriesTable:
    """Read a header-plus-rows CSV whose first column is a timestamp.

    Line numbers in errors and in the report count the header as line 1.
    """
    config = config or IngestConfig()
    if config.missing not in ("reject", "ffill"):
        raise ConfigError(f"missing-value policy must be 'reject' or 'ffill', got {config.missing!r}")
    path = Path(path)
    report = IngestReport(str(path))
    stamps: list[np.datetime64] = []
    rows: list[list[float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        if len(header) < 2:
            raise IngestError(f"{path}: need a timestamp column and at least one channel, header is {header}")
        channels = tuple(h.strip() for h in header[1:])
        for line_no, record in enumerate(reader, start=2):
            if config.max_rows is not None and len(rows) >= config.max_rows:
                break
            if not record or all(not c.strip() for c in record):
                continue
            if len(record) != len(header):
                raise IngestError(f"{path}: line {line_no} has {len(record)} fields, expected {len(header)}")
            try:
                stamp = _parse_time(record[0])
            except ValueError:
                raise IngestError(f"{path}: line {line_no}, column {header[0]!r}: bad timestamp {record[0]!r}") from None
            values: list[float] = []
            gap = False
            for col, cell in zip(channels, record[1:]):
                cell = cell.strip()
                if cell in _MISSING:
                    values.append(math.nan)
                    gap = True
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    raise IngestError(f"{path}: line {line_no}, column {col!r}: not a number {cell!r}") from None
            if gap:
                if config.missing == "reject" or not rows:
                    report.rejected_rows.append(line_no)
                    continue
                prev = rows[-1]
                for j, v in enumerate(values):
                    if math.isnan(v):
                        values[j] = prev[j]
                        report.filled_cells += 1
            if stamps and stamp <= stamps[-1]:
                raise DataError(f"{path}: line {line_no}: timestamp {record[0].strip()} is not after the previous row")
            stamps.append(stamp)
            rows.append(values)
    table = SeriesTable(np.array(stamps, dtype="datetime64[s]"),
                        np.array(rows, dtype=np.float64).reshape(len(rows), len(channels)), channels, report)
    if config.columns is not None:
        table = table.select(config.columns)
    report.rows, report.channels = table.n_rows, table.n_channels
    return table


def write_csv(table: SeriesTable, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", *table.channels])
        for stamp, row in zip(table.timestamps, table.values):
            text = str(stamp).replace("T", " ")
            writer.writerow([text, *(repr(float(v)) for v in row)])
    return path


# -- splits -----------------------------------------------------------------------

@dataclass(frozen=True)
class Splits:
    """Half-open row ranges of the three chronological splits."""

    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]

    def __getitem__(self, name: str) -> tuple[int, int]:
        return getattr(self, name)


def sampling_interval(timestamps: np.ndarray) -> int:
    """Median spacing in seconds."""
    if len(timestamps) < 2:
        raise DataError("need at least two timestamps to infer the sampling interval")
    return int(np.median(np.diff(timestamps).astype("timedelta64[s]").astype(np.int64)))


def split(table: SeriesTable | int, scheme: str = "ratio", ratios=(0.7, 0.1, 0.2), months=(12, 4, 4),
          interval_s: int | None = None) -> Splits:
    """Chronological train/val/test borders.

    ``ratio``: train and test take ``int(N * r)`` rows, validation the rest.
    ``ett_months``: months of 30 days converted to rows via the sampling interval.
    """
    n = table if isinstance(table, int) else table.n_rows
    if scheme == "ratio":
        if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
        n_train, n_test = int(n * ratios[0]), int(n * ratios[2])
        n_val = n - n_train - n_test
    elif scheme == "ett_months":
        if interval_s is None:
            if isinstance(table, int):
                raise ConfigError("ett_months on a bare row count needs interval_s")
            interval_s = sampling_interval(table.timestamps)
        per_month = _MONTH_DAYS * 86400 // interval_s
        n_train, n_val, n_test = (m * per_month for m in months)
        if n_train + n_val + n_test > n:
            raise DataError(f"ett_months needs {n_train + n_val + n_test} rows, table has {n}")
    else:
        raise ConfigError(f"unknown split scheme {scheme!r}; expected 'ratio' or 'ett_months'")
    if min(n_train, n_val, n_test) <= 0:
        raise DataError(f"table of {n} rows is too short for scheme {scheme!r}")
    return Splits((0, n_train), (n_train, n_train + n_val), (n_train + n_val, n_train + n_val + n_test))


def split_rows(values: np.ndarray, splits: Splits, which: str, lookback: int,
               context: bool = True) -> tuple[np.ndarray, int]:
    """Rows for one split, optionally prefixed by ``lookback`` rows of the preceding split.

    Returns ``(rows, offset)`` where ``offset`` is the absolute index of ``rows[0]``.
    The prefix only ever feeds inputs; every target stays inside the split.
    """
    start, stop = splits[which]
    if context and which != "train":
        start = max(0, start - lookback)
    return values[start:stop], start


# -- windows ------------------------------------------------------------------------

@dataclass
class WindowBatch:
    inputs: np.ndarray
    targets: np.ndarray
    starts: np.ndarray
    norm: NormState | None = None

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def take(self, idx) -> "WindowBatch":
        return WindowBatch(self.inputs[idx], self.targets[idx], self.starts[idx])


def window_count(n_rows: int, lookback: int, horizon: int, stride: int = 1) -> int:
    if n_rows < lookback + horizon:
        return 0
    return (n_rows - lookback - horizon) // stride + 1


def windows(rows: np.ndarray, lookback: int, horizon: int, stride: int = 1, batch_size: int | None = None,
            offset: int = 0) -> Iterator[WindowBatch]:
    """Yield batches of (input, target) pairs: inputs rows [t, t+L), targets [t+L, t+L+T).

    ``starts`` are absolute row indices (``offset`` added).  Too few rows
    yield nothing and raise a warning.
    """
    if lookback < 1 or horizon < 1 or stride < 1:
        raise ConfigError(f"lookback, horizon and stride must be >= 1, got {lookback}, {horizon}, {stride}")
    rows = np.asarray(rows)
    if rows.ndim == 1:
        rows = rows[:, None]
    count = window_count(rows.shape[0], lookback, horizon, stride)
    if count == 0:
        warnings.warn(f"{rows.shape[0]} rows cannot hold a window of {lookback}+{horizon}; no windows produced",
                      stacklevel=2)
        return
    starts = np.arange(count) * stride
    step = count if batch_size is None else batch_size
    span = np.arange(lookback + horizon)
    for s in range(0, count, step):
        t = starts[s:s + step]
        block = rows[t[:, None] + span[None, :]]
        yield WindowBatch(block[:, :lookback].copy(), block[:, lookback:].copy(), t + offset)


def collect(stream) -> WindowBatch:
    """Concatenate a window stream into one batch; raises on an empty stream."""
    batches = list(stream)
    if not batches:
        raise DataError("window stream is empty")
    return WindowBatch(np.concatenate([b.inputs for b in batches]), np.concatenate([b.targets for b in batches]),
                       np.concatenate([b.starts for b in batches]))


def channel_flatten(batch: np.ndarray) -> np.ndarray:
    """(B, L, M) -> (B*M, L, 1); row ``b*M + c`` holds channel ``c`` of window ``b``."""
    b, length, m = batch.shape
    return np.ascontiguousarray(batch.transpose(0, 2, 1)).reshape(b * m, length, 1)


def channel_unflatten(flat: np.ndarray, channels: int) -> np.ndarray:
    rows, length, one = flat.shape
    if one != 1 or rows % channels:
        raise DataError(f"cannot unflatten {flat.shape} into {channels} channels")
    return np.ascontiguousarray(flat.reshape(rows // channels, channels, length).transpose(0, 2, 1))


# -- synthetic surrogate -----------------------------------------------------------------

def synthetic_ett(n_rows: int = 4000, seed: int = 0, start: str = "2016-07-01 00:00:00") -> SeriesTable:
    """Hourly 7-channel series shaped like ETTh1: daily and weekly cycles, drift, AR(1) noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_rows, dtype=np.float64)
    stamps = np.datetime64(datetime.fromisoformat(start), "s") + (t.astype(np.int64) * 3600).astype("timedelta64[s]")
    cols = []
    for c in range(len(ETT_COLUMNS)):
        amp_day = rng.uniform(1.0, 3.0)
        amp_week = rng.uniform(0.3, 1.0)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        base = rng.uniform(-2, 10)
        drift = rng.normal(0, 1.5) * np.sin(2 * np.pi * t / (n_rows * 1.7) + phase[2])
        noise = np.zeros(n_rows)
        eps = rng.normal(0, 0.25, size=n_rows)
        for i in range(1, n_rows):
            noise[i] = 0.8 * noise[i - 1] + eps[i]
        cols.append(base + amp_day * np.sin(2 * np.pi * t / 24 + phase[0])
                    + 0.5 * amp_day * np.sin(4 * np.pi * t / 24 + phase[1])
                    + amp_week * np.sin(2 * np.pi * t / 168 + phase[1]) + drift + noise)
    return SeriesTable(stamps, np.stack(cols, axis=1), ETT_COLUMNS)
