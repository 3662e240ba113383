"""
speed_dataset.py

Speed time series ingestion, cleaning and sliding-window feature embedding.

speeds.csv layout:
  timestamp,<station_id_1>,...,<station_id_N>
  ISO-8601 timestamps, speeds in mph, an empty cell means missing.

A window anchored at row t carries the F most recent speeds of every node
(rows t-F+1 .. t) as input and the next T_out speeds (rows t+1 .. t+T_out) as
target, so the input stack has shape S x |N| x F. Windows never span a gap in
the timestamp grid, so days removed by cleaning are never bridged.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from graph_builder import SensorGraph

logger = logging.getLogger("sparse_stgt.dataset")

DEFAULT_DAY_THRESHOLD = 0.5
DEFAULT_SPLIT = (0.7, 0.1, 0.2)


class SeriesError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SpeedSeries:
    node_ids: Tuple[str, ...]
    step_minutes: int
    values: np.ndarray  # T_total x |N|, NaN marks a missing reading
    timestamps: pd.DatetimeIndex

    @property
    def num_steps(self) -> int:
        return self.values.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.values.shape[1]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, index=self.timestamps, columns=list(self.node_ids))


@dataclass(frozen=True, eq=False)
class WindowedBatch:
    inputs: np.ndarray  # S x |N| x F
    targets: np.ndarray  # S x |N| x T_out
    anchor_index: np.ndarray  # row of the series each window is anchored at
    anchor_times: pd.DatetimeIndex
    node_ids: Tuple[str, ...]
    step_minutes: int

    @property
    def history_steps(self) -> int:
        return self.inputs.shape[2]

    @property
    def horizon_steps(self) -> int:
        return self.targets.shape[2]

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def take(self, idx) -> "WindowedBatch":
        idx = np.asarray(idx)
        return WindowedBatch(
            inputs=self.inputs[idx],
            targets=self.targets[idx],
            anchor_index=self.anchor_index[idx],
            anchor_times=self.anchor_times[idx],
            node_ids=self.node_ids,
            step_minutes=self.step_minutes,
        )


def _from_frame(df: pd.DataFrame, step_minutes: int) -> SpeedSeries:
    return SpeedSeries(
        node_ids=tuple(str(c) for c in df.columns),
        step_minutes=step_minutes,
        values=df.to_numpy(dtype=np.float64, copy=True),
        timestamps=pd.DatetimeIndex(df.index),
    )


def load_series(path: str, graph: SensorGraph, step_minutes: Optional[int] = None) -> SpeedSeries:
    """
    Read speeds.csv and align its columns to the graph's node order. Absent
    timestamps inside the covered range become all-missing rows on the regular
    step grid, so cleaning sees them.
    """
    try:
        df = pd.read_csv(path, dtype={"timestamp": str}, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise SeriesError(f"cannot parse {path}: {e}") from e
    if "timestamp" not in df.columns:
        raise SeriesError(f"{path} has no 'timestamp' column")
    df.columns = [str(c).strip() for c in df.columns]
    missing = [sid for sid in graph.node_ids if sid not in df.columns]
    if missing:
        raise SeriesError(f"speed file is missing station column(s): {', '.join(missing)}")

    try:
        stamps = pd.DatetimeIndex(pd.to_datetime(df["timestamp"]))
    except (ValueError, TypeError) as e:
        raise SeriesError(f"{path}: unparseable timestamp ({e})") from e
    if stamps.has_duplicates:
        dup = stamps[stamps.duplicated()][0]
        raise SeriesError(f"duplicate timestamp {dup.isoformat()}")
    if not stamps.is_monotonic_increasing:
        raise SeriesError("timestamps are not sorted in increasing order")

    raw = df[list(graph.node_ids)]
    frame = raw.apply(pd.to_numeric, errors="coerce")
    malformed = (frame.isna() & raw.notna()).to_numpy()
    if malformed.any():
        row, col = np.argwhere(malformed)[0]
        raise SeriesError(f"{path}: station {raw.columns[col]} has non-numeric speed {raw.iat[row, col]!r} "
                          f"at {stamps[row].isoformat()}")
    frame.index = stamps

    if step_minutes is None:
        if len(stamps) < 2:
            raise SeriesError("cannot infer the time step from fewer than two rows")
        step_minutes = int((stamps[1:] - stamps[:-1]).min().total_seconds() // 60)
    if step_minutes < 1:
        raise SeriesError(f"step must be at least one minute, got {step_minutes}")
    grid = pd.date_range(stamps[0], stamps[-1], freq=f"{step_minutes}min")
    if not stamps.isin(grid).all():
        raise SeriesError(f"timestamps are not on a regular {step_minutes}-minute grid")
    frame = frame.reindex(grid)

    logger.info("Loaded %d steps x %d stations from %s", len(grid), len(graph.node_ids), path)
    return _from_frame(frame, step_minutes)


def clean_series(raw: SpeedSeries, day_threshold: float = DEFAULT_DAY_THRESHOLD) -> SpeedSeries:
    """
    Two-pass cleaning. A station counts as missing on a day when any of its
    readings that day is missing.
      1. drop whole days where more than day_threshold of the stations are missing
      2. drop every station still missing on any retained day
    """
    if not 0 < day_threshold <= 1:
        raise SeriesError(f"day_threshold must be in (0, 1], got {day_threshold}")
    df = raw.to_frame()
    days = df.index.normalize()

    missing_by_day = df.isna().groupby(days).any()  # day x station
    bad_fraction = missing_by_day.mean(axis=1)
    keep_days = bad_fraction[bad_fraction <= day_threshold].index
    dropped_days = len(bad_fraction) - len(keep_days)
    df = df[days.isin(keep_days)]

    working = [c for c in df.columns if not df[c].isna().any()]
    dropped_stations = df.shape[1] - len(working)
    df = df[working]

    if df.shape[0] == 0 or df.shape[1] == 0:
        raise SeriesError("no working stations remain")
    if dropped_days or dropped_stations:
        logger.info("Cleaning removed %d day(s) and %d station(s)", dropped_days, dropped_stations)
    return _from_frame(df, raw.step_minutes)


def _contiguous_runs(timestamps: pd.DatetimeIndex, step_minutes: int):
    """(start, stop) row ranges over which timestamps advance by exactly one step."""
    if len(timestamps) == 0:
        return []
    step = pd.Timedelta(minutes=step_minutes)
    breaks = np.flatnonzero(np.asarray(timestamps[1:] - timestamps[:-1]) != step.to_timedelta64()) + 1
    bounds = np.concatenate([[0], breaks, [len(timestamps)]])
    return list(zip(bounds[:-1], bounds[1:]))


def make_windows(series: SpeedSeries, history_steps: int, horizon_steps: int, stride: int = 1) -> WindowedBatch:
    F, T_out = history_steps, horizon_steps
    if F < 1 or T_out < 1 or stride < 1:
        raise SeriesError(f"history, horizon and stride must be >= 1 (got {F}, {T_out}, {stride})")
    if np.isnan(series.values).any():
        raise SeriesError("series has missing values; clean it before windowing")
    span = F + T_out

    inputs, targets, anchors = [], [], []
    for start, stop in _contiguous_runs(series.timestamps, series.step_minutes):
        if stop - start < span:
            continue
        block = series.values[start:stop]
        # windows x nodes x span
        view = np.lib.stride_tricks.sliding_window_view(block, span, axis=0)[::stride]
        inputs.append(view[:, :, :F])
        targets.append(view[:, :, F:])
        anchors.append(start + F - 1 + stride * np.arange(view.shape[0]))
    if not inputs:
        raise SeriesError(f"series too short: need at least {span} contiguous steps")

    anchor_index = np.concatenate(anchors)
    return WindowedBatch(
        inputs=np.ascontiguousarray(np.concatenate(inputs), dtype=np.float64),
        targets=np.ascontiguousarray(np.concatenate(targets), dtype=np.float64),
        anchor_index=anchor_index,
        anchor_times=series.timestamps[anchor_index],
        node_ids=series.node_ids,
        step_minutes=series.step_minutes,
    )


def split_sizes(total: int, ratios: Sequence[float]) -> Tuple[int, int, int]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not np.isclose(sum(ratios), 1.0):
        raise SeriesError(f"split ratios must be three non-negative numbers summing to 1, got {tuple(ratios)}")
    n_train = int(round(total * ratios[0]))
    n_val = int(round(total * ratios[1]))
    n_test = total - n_train - n_val
    for name, size in (("train", n_train), ("val", n_val), ("test", n_test)):
        if size <= 0:
            raise SeriesError(f"empty {name} split ({total} windows, ratios {tuple(ratios)})")
    return n_train, n_val, n_test


def split(batch: WindowedBatch, ratios: Sequence[float] = DEFAULT_SPLIT):
    """Contiguous-in-time train/val/test split; windows keep their time order."""
    n_train, n_val, _ = split_sizes(len(batch), ratios)
    order = np.argsort(batch.anchor_index, kind="stable")
    return (
        batch.take(order[:n_train]),
        batch.take(order[n_train:n_train + n_val]),
        batch.take(order[n_train + n_val:]),
    )


@dataclass(frozen=True, eq=False)
class Normalizer:
    """Per-node z-score; mean and std are |N| vectors."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, batch: WindowedBatch, min_std: float = 1e-6) -> "Normalizer":
        stacked = np.concatenate([batch.inputs, batch.targets], axis=2)
        mean = stacked.mean(axis=(0, 2))
        std = stacked.std(axis=(0, 2))
        std = np.where(std < min_std, 1.0, std)
        return cls(mean=mean, std=std)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        """x is [..., |N|, steps]."""
        return (x - self.mean[:, None]) / self.std[:, None]

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std[:, None] + self.mean[:, None]


def write_series_csv(series: SpeedSeries, path: str) -> None:
    df = series.to_frame()
    df.index = df.index.strftime("%Y-%m-%dT%H:%M:%S")
    df.index.name = "timestamp"
    df.to_csv(path, na_rep="", float_format="%.6f", lineterminator="\n")
