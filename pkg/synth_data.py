"""
synth_data.py

Seeded synthetic traffic: a small road graph and a speed series in which
rush-hour congestion travels along the graph with a fixed lag per hop, so
neighbouring stations lead and lag each other.

  speed(node, t) = free_flow - amplitude * wave(node, t) + noise

wave is a Gaussian bump around each rush-hour peak, delayed by
hops(node) * lag_steps, and noise is Gaussian clipped to +-3 sigma. Shifted
variants change the congestion pattern while keeping graph and node order,
standing in for later time periods in transfer evaluation.
"""

import logging
import math
import os
from dataclasses import dataclass, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from graph_builder import SensorGraph, graph_from_edges, write_graph_csv
from speed_dataset import SpeedSeries, write_series_csv

logger = logging.getLogger("sparse_stgt.synth")

TOPOLOGIES = ("line", "grid", "ring")
SHIFTS = ("none", "seasonal-amplitude", "demand-drop", "year-later", "demand-restructure")
NODE_ID_BASE = 700000


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    num_nodes: int = 20
    topology: str = "line"
    free_flow: float = 65.0
    amplitude: float = 25.0
    noise_std: float = 1.0
    step_minutes: int = 5
    days: int = 14
    start: str = "2021-01-04"
    rush_hours: Tuple[float, ...] = (8.0, 17.5)
    rush_width_minutes: float = 60.0
    lag_steps: int = 2  # wave delay per hop
    peak_offset_steps: int = 0
    segment_km: float = 1.0
    omega: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.topology not in TOPOLOGIES:
            raise SynthConfigError(f"unknown topology '{self.topology}' (expected one of {', '.join(TOPOLOGIES)})")
        if self.num_nodes < 1:
            raise SynthConfigError(f"num_nodes must be >= 1, got {self.num_nodes}")
        if self.step_minutes < 1 or 1440 % self.step_minutes:
            raise SynthConfigError(f"step_minutes must divide a day, got {self.step_minutes}")
        if self.days < 1:
            raise SynthConfigError(f"days must be >= 1, got {self.days}")
        if self.amplitude < 0 or self.noise_std < 0:
            raise SynthConfigError("amplitude and noise_std must be non-negative")
        if self.amplitude + 3.0 * self.noise_std >= self.free_flow:
            raise SynthConfigError(
                f"amplitude {self.amplitude} + 3 * noise_std {self.noise_std} must stay below free_flow {self.free_flow}"
            )
        if self.rush_width_minutes <= 0 or self.lag_steps < 0 or self.segment_km <= 0:
            raise SynthConfigError("rush_width_minutes and segment_km must be positive, lag_steps non-negative")

    @property
    def steps_per_day(self) -> int:
        return 1440 // self.step_minutes


def _grid_width(n: int) -> int:
    return int(math.ceil(math.sqrt(n)))


def layout(cfg: SynthConfig) -> Tuple[List[Tuple[int, int]], List[Tuple[float, float]], np.ndarray]:
    """Undirected node pairs, (lat, lon) per node and hop distance from node 0."""
    n = cfg.num_nodes
    idx = np.arange(n)
    if cfg.topology == "grid":
        w = _grid_width(n)
        rows, cols = idx // w, idx % w
        pairs = [(i, i + 1) for i in range(n - 1) if cols[i] + 1 < w]
        pairs += [(i, i + w) for i in range(n - w)]
        hops = rows + cols
        coords = [(34.0 + 0.01 * r, -118.0 + 0.01 * c) for r, c in zip(rows, cols)]
    else:
        pairs = [(i, i + 1) for i in range(n - 1)]
        hops = idx.copy()
        if cfg.topology == "ring" and n > 2:
            pairs.append((n - 1, 0))
            hops = np.minimum(idx, n - idx)
        coords = [(34.0, -118.0 + 0.01 * i) for i in range(n)]
    return pairs, coords, hops.astype(np.int64)


def node_ids(cfg: SynthConfig) -> Tuple[str, ...]:
    return tuple(str(NODE_ID_BASE + k) for k in range(cfg.num_nodes))


def build_synth_graph(cfg: SynthConfig) -> SensorGraph:
    pairs, _, _ = layout(cfg)
    edges = []
    for i, j in pairs:
        edges.append((i, j, cfg.segment_km))
        edges.append((j, i, cfg.segment_km))
    edges.sort()
    return graph_from_edges(node_ids(cfg), edges, cfg.omega)


def congestion_wave(cfg: SynthConfig, hops: np.ndarray) -> np.ndarray:
    """T x N congestion level in [0, 1]."""
    total = cfg.days * cfg.steps_per_day
    minute_of_day = (np.arange(total) % cfg.steps_per_day) * cfg.step_minutes
    delay = (hops * cfg.lag_steps + cfg.peak_offset_steps) * cfg.step_minutes
    wave = np.zeros((total, hops.size))
    for peak in cfg.rush_hours:
        diff = minute_of_day[:, None] - (peak * 60.0 + delay[None, :])
        diff = (diff + 720.0) % 1440.0 - 720.0
        wave = np.maximum(wave, np.exp(-0.5 * (diff / cfg.rush_width_minutes) ** 2))
    return wave


def _series(cfg: SynthConfig, rng: np.random.Generator) -> SpeedSeries:
    _, _, hops = layout(cfg)
    wave = congestion_wave(cfg, hops)
    noise = np.clip(rng.normal(0.0, 1.0, size=wave.shape), -3.0, 3.0) * cfg.noise_std
    values = cfg.free_flow - cfg.amplitude * wave + noise
    timestamps = pd.date_range(pd.Timestamp(cfg.start), periods=wave.shape[0], freq=f"{cfg.step_minutes}min")
    return SpeedSeries(node_ids=node_ids(cfg), step_minutes=cfg.step_minutes, values=values, timestamps=timestamps)


def generate(cfg: SynthConfig) -> Tuple[SensorGraph, SpeedSeries]:
    cfg.validate()
    graph = build_synth_graph(cfg)
    series = _series(cfg, np.random.default_rng(cfg.seed))
    logger.info("Generated %s graph with %d stations and %d steps (seed %d)",
                cfg.topology, cfg.num_nodes, series.num_steps, cfg.seed)
    return graph, series


def shifted_config(cfg: SynthConfig, shift: str) -> SynthConfig:
    if shift == "none":
        return cfg
    if shift == "seasonal-amplitude":
        return replace(cfg, amplitude=cfg.amplitude * 1.5)
    if shift == "demand-drop":
        # half the congestion, rush hours 90 minutes later
        return replace(cfg, amplitude=cfg.amplitude * 0.5, peak_offset_steps=cfg.peak_offset_steps + 18)
    if shift == "demand-restructure":
        # demand-drop with shorter rush hours spreading more slowly and faster free flow
        return replace(cfg, amplitude=cfg.amplitude * 0.5, free_flow=cfg.free_flow * 1.1,
                       peak_offset_steps=cfg.peak_offset_steps + 18, lag_steps=cfg.lag_steps + 2,
                       rush_width_minutes=cfg.rush_width_minutes * 0.6)
    if shift == "year-later":
        return replace(cfg, amplitude=cfg.amplitude * 0.9, peak_offset_steps=cfg.peak_offset_steps + 1)
    raise SynthConfigError(f"unknown shift '{shift}' (expected one of {', '.join(SHIFTS)})")


def generate_shifted(cfg: SynthConfig, shift: str) -> SpeedSeries:
    shifted = shifted_config(cfg, shift)
    shifted.validate()
    if shift == "none":
        rng = np.random.default_rng(cfg.seed)
    else:
        rng = np.random.default_rng([cfg.seed, SHIFTS.index(shift)])
    return _series(shifted, rng)


def write_dataset(cfg: SynthConfig, out_dir: str, shifts: Sequence[str] = ()) -> Dict[str, str]:
    """
    stations.csv, segments.csv and speeds.csv under out_dir, plus one
    speeds-<shift>.csv per requested shift. Returns the paths written.
    """
    os.makedirs(out_dir, exist_ok=True)
    graph, series = generate(cfg)
    _, coords, _ = layout(cfg)
    paths = {
        "stations": os.path.join(out_dir, "stations.csv"),
        "segments": os.path.join(out_dir, "segments.csv"),
        "speeds": os.path.join(out_dir, "speeds.csv"),
    }
    write_graph_csv(graph, paths["stations"], paths["segments"], coords=coords)
    write_series_csv(series, paths["speeds"])
    for shift in shifts:
        if shift == "none":
            continue
        key = f"speeds-{shift}"
        paths[key] = os.path.join(out_dir, f"{key}.csv")
        write_series_csv(generate_shifted(cfg, shift), paths[key])
    logger.info("Synthetic dataset written to %s", out_dir)
    return paths
