"""
config_manager.py

Run configuration for training, evaluation and sweeps.

Stored as one flat JSON object (indent=2). Every key is optional in the file;
missing keys take the defaults below and unknown keys are rejected. CLI flags
are layered on top with apply_overrides.

Functions:
  - default_config() -> RunConfig
  - load_config(path) -> RunConfig
  - save_config(cfg, path) -> path written
  - validate_config(cfg) -> (bool, issues)
  - apply_overrides(cfg, overrides) -> RunConfig
  - parse_horizon("45min", step_minutes) -> steps
"""

import json
import os
import re
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, List, Optional, Tuple

from synth_data import SHIFTS, TOPOLOGIES

CONFIG_FILE = os.path.join(os.path.dirname(__file__), "config.json")

MODES = ("gcn", "gat")
FLOAT_TUPLES = ("split", "sweep_grid")
STR_TUPLES = ("synth_shifts", "checkpoints")
SCHEDULES = ("constant", "cosine")
NORMALIZATIONS = ("sym", "row")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    mode: str = "gcn"
    history_steps: int = 12
    horizon_steps: int = 9
    stride: int = 1
    step_minutes: int = 5
    sparsity: float = 0.9
    death_rate: float = 0.5
    death_rate_schedule: str = "constant"
    update_frequency: int = 1000
    epochs: int = 200
    batch_size: int = 242
    learning_rate: float = 0.001
    momentum: float = 0.9
    seed: int = 0
    omega: float = 0.1
    normalization: str = "sym"
    spatial_width: int = 64
    lstm_hidden: int = 128
    gat_heads: int = 4
    gat_slope: float = 0.2
    split: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    day_threshold: float = 0.5
    mape_epsilon: float = 1.0
    data_dir: str = "data"
    output_dir: str = "runs"
    # synth
    synth_nodes: int = 20
    synth_topology: str = "line"
    synth_days: int = 14
    synth_amplitude: float = 25.0
    synth_noise: float = 1.0
    synth_shifts: Tuple[str, ...] = ()
    # eval
    checkpoints: Tuple[str, ...] = ()
    periods: str = ""  # TAG=path,... ; empty means every period file in data_dir
    # sweep
    sweep_grid: Tuple[float, ...] = ()  # empty means 0 plus SPARSITY_GRID
    parallel: int = 1
    # flops without a graph on disk
    flops_nodes: int = 0  # 0 reads the graph from data_dir
    flops_edges: int = -1  # -1 assumes a bidirectional line

    def as_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key in FLOAT_TUPLES + STR_TUPLES:
            data[key] = list(getattr(self, key))
        return data


def default_config() -> RunConfig:
    return RunConfig()


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value: Any) -> Any:
    kind = _FIELD_TYPES[key]
    try:
        if key in FLOAT_TUPLES or key in STR_TUPLES:
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            convert = float if key in FLOAT_TUPLES else (lambda v: str(v).strip())
            return tuple(convert(v) for v in value)
        if kind in (int, "int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"{value} is not an integer")
            return int(value)
        if kind in (float, "float"):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config key '{key}': invalid value {value!r} ({e})") from e


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    unknown = sorted(set(data) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = replace(default_config(), **{k: _coerce(k, v) for k, v in data.items()})
    ok, issues = validate_config(cfg)
    if not ok:
        raise ConfigError("; ".join(issues))
    return cfg


def load_config(path: Optional[str] = None) -> RunConfig:
    """Load config from disk, overlaying defaults; a missing default file gives the defaults."""
    if path is None:
        path = CONFIG_FILE
        if not os.path.exists(path):
            return default_config()
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold one JSON object")
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: Optional[str] = None) -> str:
    path = path or CONFIG_FILE
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg.as_dict(), f, indent=2)
    return path


def validate_config(cfg: RunConfig) -> Tuple[bool, List[str]]:
    """Collect every problem instead of stopping at the first."""
    issues: List[str] = []
    if cfg.mode not in MODES:
        issues.append(f"mode must be one of {', '.join(MODES)}, got '{cfg.mode}'")
    for key in ("history_steps", "horizon_steps", "stride", "step_minutes", "update_frequency",
                "batch_size", "spatial_width", "lstm_hidden", "gat_heads"):
        if getattr(cfg, key) < 1:
            issues.append(f"{key} must be >= 1, got {getattr(cfg, key)}")
    if cfg.epochs < 0:
        issues.append(f"epochs must be >= 0, got {cfg.epochs}")
    if not 0 <= cfg.sparsity < 1:
        issues.append(f"sparsity must be in [0, 1), got {cfg.sparsity}")
    if not 0 < cfg.death_rate < 1:
        issues.append(f"death_rate must be in (0, 1), got {cfg.death_rate}")
    if cfg.death_rate_schedule not in SCHEDULES:
        issues.append(f"death_rate_schedule must be one of {', '.join(SCHEDULES)}")
    if cfg.learning_rate <= 0:
        issues.append(f"learning_rate must be positive, got {cfg.learning_rate}")
    if not 0 <= cfg.momentum < 1:
        issues.append(f"momentum must be in [0, 1), got {cfg.momentum}")
    if cfg.omega <= 0:
        issues.append(f"omega must be positive, got {cfg.omega}")
    if cfg.normalization not in NORMALIZATIONS:
        issues.append(f"normalization must be one of {', '.join(NORMALIZATIONS)}")
    if cfg.mode == "gat" and cfg.gat_heads >= 1 and cfg.spatial_width % cfg.gat_heads:
        issues.append(f"spatial_width {cfg.spatial_width} is not divisible by gat_heads {cfg.gat_heads}")
    if cfg.gat_slope < 0:
        issues.append(f"gat_slope must be non-negative, got {cfg.gat_slope}")
    if len(cfg.split) != 3 or any(r < 0 for r in cfg.split) or abs(sum(cfg.split) - 1.0) > 1e-9:
        issues.append(f"split must be three non-negative ratios summing to 1, got {list(cfg.split)}")
    if not 0 < cfg.day_threshold <= 1:
        issues.append(f"day_threshold must be in (0, 1], got {cfg.day_threshold}")
    if cfg.mape_epsilon < 0:
        issues.append(f"mape_epsilon must be non-negative, got {cfg.mape_epsilon}")
    if cfg.synth_nodes < 1 or cfg.synth_days < 1 or cfg.parallel < 1:
        issues.append("synth_nodes, synth_days and parallel must be >= 1")
    if cfg.synth_topology not in TOPOLOGIES:
        issues.append(f"synth_topology must be one of {', '.join(TOPOLOGIES)}, got '{cfg.synth_topology}'")
    if cfg.synth_amplitude < 0 or cfg.synth_noise < 0:
        issues.append("synth_amplitude and synth_noise must be non-negative")
    unknown_shifts = [s for s in cfg.synth_shifts if s not in SHIFTS[1:]]
    if unknown_shifts:
        issues.append(f"unknown synth shift(s): {', '.join(unknown_shifts)}")
    if any(not 0 <= d < 1 for d in cfg.sweep_grid):
        issues.append(f"sweep_grid values must lie in [0, 1), got {list(cfg.sweep_grid)}")
    if cfg.flops_nodes < 0 or cfg.flops_edges < -1:
        issues.append("flops_nodes must be >= 0 and flops_edges >= -1")
    return (len(issues) == 0, issues)


def apply_overrides(cfg: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Replace the keys whose override is not None; the result is validated."""
    given = {k: v for k, v in overrides.items() if v is not None}
    if not given:
        return cfg
    merged = cfg.as_dict()
    merged.update(given)
    return config_from_dict(merged)


_HORIZON = re.compile(r"^\s*(\d+)\s*(min|m|h)?\s*$", re.IGNORECASE)


def parse_horizon(text: str, step_minutes: int) -> int:
    """'45min' -> 9 steps at 5-minute data; a bare number is a step count."""
    m = _HORIZON.match(str(text))
    if not m:
        raise ConfigError(f"cannot parse horizon '{text}' (examples: 45min, 1h, 9)")
    value, unit = int(m.group(1)), (m.group(2) or "").lower()
    if not unit:
        steps = value
    else:
        minutes = value * 60 if unit == "h" else value
        if minutes % step_minutes:
            raise ConfigError(f"horizon {text} is not a multiple of the {step_minutes}-minute step")
        steps = minutes // step_minutes
    if steps < 1:
        raise ConfigError(f"horizon must be at least one step, got '{text}'")
    return steps
