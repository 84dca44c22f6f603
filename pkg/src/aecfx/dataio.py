"""Delimited time-series ingestion, min-max normalization and windowing.

A *schema* file (YAML) describes a dataset's table layout::

    delimiter: ";"
    timestamp: datetime          # optional
    channels: [Accelerometer1RMS, Accelerometer2RMS, Current, ...]
    label: anomaly               # optional, 0 = normal, 1 = anomalous
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
import yaml

from .exceptions import ConfigurationError, DataError


@dataclass(frozen=True)
class Schema:
    channels: tuple[str, ...]
    timestamp: str | None = None
    label: str | None = None
    delimiter: str = ","

    def __post_init__(self):
        if not self.channels:
            raise ConfigurationError("schema must name at least one channel")
        object.__setattr__(self, "channels", tuple(self.channels))

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        unknown = set(d) - {"channels", "timestamp", "label", "delimiter"}
        if unknown:
            raise ConfigurationError(f"unknown schema keys: {sorted(unknown)}")
        if "channels" not in d:
            raise ConfigurationError("schema is missing 'channels'")
        return cls(
            channels=tuple(str(c) for c in d["channels"]),
            timestamp=d.get("timestamp"),
            label=d.get("label"),
            delimiter=str(d.get("delimiter", ",")),
        )

    def to_dict(self) -> dict:
        return {
            "delimiter": self.delimiter,
            "timestamp": self.timestamp,
            "channels": list(self.channels),
            "label": self.label,
        }


def load_schema(path) -> Schema:
    with open(path) as fh:
        d = yaml.safe_load(fh)
    if not isinstance(d, dict):
        raise ConfigurationError(f"{path}: schema must be a mapping")
    return Schema.from_dict(d)


@dataclass
class SeriesFile:
    """One recording: ``values`` is ``(T, n)``, ``labels`` is ``(T,)`` or None.

    ``offset`` is the row index of ``values[0]`` in the source file, so that
    slices keep file coordinates in their provenance.
    """

    values: np.ndarray
    channels: tuple[str, ...]
    timestamps: np.ndarray | None = None
    labels: np.ndarray | None = None
    path: str = ""
    offset: int = 0

    def __len__(self) -> int:
        return len(self.values)

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "SeriesFile":
        return replace(
            self,
            values=self.values[start:stop],
            timestamps=None if self.timestamps is None else self.timestamps[start:stop],
            labels=None if self.labels is None else self.labels[start:stop],
            offset=self.offset + start,
        )


def _parses(text: str) -> bool:
    try:
        return bool(np.isfinite(float(text)))
    except ValueError:
        return False


def load_series(path, schema: Schema) -> SeriesFile:
    """Parse a delimited file according to ``schema``.

    Raises
    ------
    DataError
        Empty file, missing columns, unparseable cells (reported with their
        1-based line number, header being line 1) or timestamps that are not
        strictly increasing.
    """
    path = Path(path)
    try:
        df = pd.read_csv(path, sep=schema.delimiter, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: file is empty") from None
    df.columns = [c.strip() for c in df.columns]
    if len(df) == 0:
        raise DataError(f"{path}: file has no data rows")
    needed = list(schema.channels)
    if schema.timestamp:
        needed.append(schema.timestamp)
    if schema.label:
        needed.append(schema.label)
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")

    def numeric(col: str) -> np.ndarray:
        raw = df[col].str.strip().to_numpy(dtype=str)
        try:
            # numpy parses strings with correct rounding, unlike pandas' fast path
            vals = raw.astype(np.float64)
            bad = ~np.isfinite(vals)
        except ValueError:
            bad = np.array([not _parses(v) for v in raw])
        if bad.any():
            rows = (np.flatnonzero(bad) + 2)[:5].tolist()
            raise DataError(f"{path}: column {col!r} has unparseable values at line(s) {rows}")
        return vals

    values = np.column_stack([numeric(c) for c in schema.channels])
    labels = None
    if schema.label:
        labels = numeric(schema.label)
        if not np.isin(labels, (0.0, 1.0)).all():
            rows = (np.flatnonzero(~np.isin(labels, (0.0, 1.0))) + 2)[:5].tolist()
            raise DataError(f"{path}: labels must be 0 or 1, see line(s) {rows}")
        labels = labels.astype(np.int8)
    timestamps = None
    if schema.timestamp:
        raw = df[schema.timestamp].str.strip()
        ts = pd.to_numeric(raw, errors="coerce")
        if ts.isna().any():
            ts = pd.to_datetime(raw, errors="coerce")
            if ts.isna().any():
                rows = (np.flatnonzero(ts.isna().to_numpy()) + 2)[:5].tolist()
                raise DataError(f"{path}: unparseable timestamps at line(s) {rows}")
            timestamps = ts.to_numpy(dtype="datetime64[ns]").astype(np.int64).astype(np.float64) / 1e9
        else:
            timestamps = ts.to_numpy(dtype=np.float64)
        steps = np.diff(timestamps)
        if (steps <= 0).any():
            line = int(np.flatnonzero(steps <= 0)[0]) + 3
            raise DataError(f"{path}: timestamps not strictly increasing at line {line}")
    return SeriesFile(values, schema.channels, timestamps, labels, str(path))


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@dataclass
class NormStats:
    minimum: np.ndarray
    maximum: np.ndarray
    channels: tuple[str, ...] = ()

    def __post_init__(self):
        self.minimum = np.asarray(self.minimum, dtype=np.float64)
        self.maximum = np.asarray(self.maximum, dtype=np.float64)
        if (self.maximum < self.minimum).any():
            raise DataError("normalization stats have max < min")

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "minimum": self.minimum.tolist(),
            "maximum": self.maximum.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["minimum"]), np.array(d["maximum"]), tuple(d["channels"]))


def fit_norm(train: Iterable[SeriesFile]) -> NormStats:
    """Per-channel min and max over all rows of the training series."""
    train = list(train)
    if not train or all(len(s) == 0 for s in train):
        raise DataError("cannot fit normalization on an empty training set")
    stacked = np.concatenate([s.values for s in train if len(s)], axis=0)
    return NormStats(stacked.min(axis=0), stacked.max(axis=0), train[0].channels)


def _span(stats: NormStats) -> np.ndarray:
    span = stats.maximum - stats.minimum
    return np.where(span > 0, span, 1.0)


def apply_norm(series: SeriesFile, stats: NormStats) -> SeriesFile:
    """Map ``v -> (v - min) / (max - min)``; constant channels map to 0."""
    if series.n_channels != len(stats.minimum):
        raise DataError(f"{series.path}: {series.n_channels} channels, stats have {len(stats.minimum)}")
    const = stats.maximum == stats.minimum
    out = (series.values - stats.minimum) / _span(stats)
    out[:, const] = 0.0
    return replace(series, values=out)


def invert_norm(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Inverse of :func:`apply_norm` on ``(..., n)`` arrays (constant channels
    come back as their single value)."""
    return np.asarray(values) * np.where(stats.maximum > stats.minimum, _span(stats), 0.0) + stats.minimum


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------


@dataclass
class WindowSet:
    """Stack of ``(n, l)`` windows with labels and provenance.

    ``windows`` is an ``(N, n, l)`` float64 array; ``provenance`` holds one
    ``(file, start_row)`` pair per window.
    """

    windows: np.ndarray
    labels: np.ndarray | None
    provenance: list[tuple[str, int]]
    length: int
    stride: int = 1
    channels: tuple[str, ...] = ()
    label_rule: str = "any"

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64)
        if self.windows.ndim != 3:
            self.windows = self.windows.reshape(0, len(self.channels) or 1, self.length)
        if self.windows.shape[2] != self.length:
            raise DataError(f"windows have length {self.windows.shape[2]}, expected {self.length}")
        if len(self.provenance) != len(self.windows):
            raise DataError("one provenance entry per window is required")
        if self.labels is not None and len(self.labels) != len(self.windows):
            raise DataError("one label per window is required")

    def __len__(self) -> int:
        return len(self.windows)

    def subset(self, mask) -> "WindowSet":
        idx = np.flatnonzero(np.asarray(mask)) if np.asarray(mask).dtype == bool else np.asarray(mask, dtype=int)
        return replace(
            self,
            windows=self.windows[idx],
            labels=None if self.labels is None else self.labels[idx],
            provenance=[self.provenance[i] for i in idx],
        )

    def save(self, directory) -> Path:
        """Write ``windows.npy``, ``labels.npy``, ``provenance.csv`` and
        ``meta.json`` to ``directory``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.save(d / "windows.npy", self.windows)
        if self.labels is not None:
            np.save(d / "labels.npy", np.asarray(self.labels, dtype=np.int8))
        elif (d / "labels.npy").exists():
            (d / "labels.npy").unlink()
        with open(d / "provenance.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["file", "start"])
            w.writerows(self.provenance)
        meta = {
            "length": self.length,
            "stride": self.stride,
            "channels": list(self.channels),
            "label_rule": self.label_rule,
            "count": len(self),
        }
        (d / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
        return d

    @classmethod
    def load(cls, directory) -> "WindowSet":
        d = Path(directory)
        if not (d / "meta.json").exists():
            raise DataError(f"{d}: no prepared window set found")
        meta = json.loads((d / "meta.json").read_text())
        labels = np.load(d / "labels.npy") if (d / "labels.npy").exists() else None
        with open(d / "provenance.csv", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        return cls(
            np.load(d / "windows.npy"),
            labels,
            [(f, int(s)) for f, s in rows],
            meta["length"],
            meta["stride"],
            tuple(meta["channels"]),
            meta["label_rule"],
        )


def _label_windows(labels: np.ndarray, starts: np.ndarray, length: int, rule: str) -> np.ndarray:
    csum = np.concatenate([[0], np.cumsum(labels, dtype=np.int64)])
    counts = csum[starts + length] - csum[starts]
    if rule == "any":
        return (counts > 0).astype(np.int8)
    if rule.startswith("fraction:"):
        frac = float(rule.split(":", 1)[1])
        return (counts >= frac * length).astype(np.int8)
    raise ConfigurationError(f"unknown label rule {rule!r}; use 'any' or 'fraction:<f>'")


def make_windows(
    series: SeriesFile, length: int, stride: int = 1, label_rule: str = "any"
) -> WindowSet:
    """Slide a window of ``length`` rows over ``series`` every ``stride`` rows.

    Produces ``(T - length) // stride + 1`` windows shaped ``(n, length)``.
    A window is labeled anomalous under ``"any"`` if one of its rows is, or
    under ``"fraction:f"`` if at least a fraction ``f`` of its rows are.
    """
    if length < 1 or stride < 1:
        raise ConfigurationError("window length and stride must be positive")
    T, n = series.values.shape
    if T < length:
        warnings.warn(f"{series.path}: series of {T} rows is shorter than window {length}", stacklevel=2)
        return WindowSet(np.empty((0, n, length)), None if series.labels is None else np.empty(0, np.int8),
                         [], length, stride, series.channels, label_rule)
    starts = np.arange(0, T - length + 1, stride)
    view = np.lib.stride_tricks.sliding_window_view(series.values, length, axis=0)
    windows = np.array(view[starts])  # (N, n, length)
    labels = None
    if series.labels is not None:
        labels = _label_windows(series.labels, starts, length, label_rule)
    prov = [(series.path, int(series.offset + s)) for s in starts]
    return WindowSet(windows, labels, prov, length, stride, series.channels, label_rule)


def concat_windowsets(sets: Sequence[WindowSet], length: int, channels: Sequence[str] = (), stride: int = 1,
                      label_rule: str = "any") -> WindowSet:
    sets = [s for s in sets if len(s)]
    n = len(channels) or (sets[0].windows.shape[1] if sets else 1)
    if not sets:
        return WindowSet(np.empty((0, n, length)), None, [], length, stride, tuple(channels), label_rule)
    have_labels = all(s.labels is not None for s in sets)
    return WindowSet(
        np.concatenate([s.windows for s in sets]),
        np.concatenate([s.labels for s in sets]) if have_labels else None,
        [p for s in sets for p in s.provenance],
        length,
        stride,
        tuple(channels) or sets[0].channels,
        label_rule,
    )


def contiguous_runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """``[start, stop)`` index ranges where ``mask`` is True."""
    mask = np.asarray(mask, dtype=bool)
    edges = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(edges == 1).tolist(), np.flatnonzero(edges == -1).tolist()))
