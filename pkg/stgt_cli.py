"""
stgt_cli.py

Command-line entry point.

  python stgt_cli.py synth --out data --shifts seasonal-amplitude,demand-drop,year-later
  python stgt_cli.py train --data data --mode gcn --horizon 45min --sparsity 0.9
  python stgt_cli.py eval  --checkpoint runs/train-a/checkpoint.json --checkpoint runs/train-b/checkpoint.json
  python stgt_cli.py sweep --data data --parallel 4
  python stgt_cli.py flops --data data --sparsity 0.9

Every command accepts --config <file.json>; flags override the file and every
flag has a config key, so the config.json copied into each run directory
reproduces the command on its own. Without --config, config.json next to this
module is read when present.

Failures print one line 'error[<category>]: <message>' and exit with 2.
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

import flops_accounting
import forecast_metrics
import synth_data
from config_manager import ConfigError, RunConfig, apply_overrides, load_config, parse_horizon
from graph_builder import GraphInputError, SensorGraph, load_graph, restrict_graph
from report_export import export_reports
from run_store import ARTIFACTS, create_run_dir
from sparse_trainer import SPARSITY_GRID, SparseState, SparsityError, init_model_masks, sparsity_report, train, write_history
from speed_dataset import Normalizer, SeriesError, WindowedBatch, clean_series, load_series, make_windows, split
from stgt_model import Architecture, CheckpointError, ModelError, StgtModel, load_checkpoint, save_checkpoint
from tensor_core import DimensionError, MaskError, NonFiniteError

logger = logging.getLogger("sparse_stgt.cli")

EXIT_OK = 0
EXIT_ERROR = 2
SWEEP_COLUMNS = ["sparsity", "mode", "horizon", "mae", "rmse", "mape", "flops_ratio"]
PERIOD_FILES = (
    ("TP0", "speeds.csv"),
    ("TP1", "speeds-seasonal-amplitude.csv"),
    ("TP2", "speeds-demand-drop.csv"),
    ("TP3", "speeds-year-later.csv"),
    ("TP4", "speeds-demand-restructure.csv"),
)

ERROR_CATEGORIES = (
    (ConfigError, "config"),
    ((GraphInputError, SeriesError, synth_data.SynthConfigError), "data"),
    ((ModelError, CheckpointError, DimensionError, MaskError, NonFiniteError, SparsityError,
      forecast_metrics.MetricError, flops_accounting.FlopsError), "model"),
    (OSError, "io"),
)


def error_category(exc: BaseException) -> Optional[str]:
    for kinds, name in ERROR_CATEGORIES:
        if isinstance(exc, kinds):
            return name
    return None


# --- pipeline ---------------------------------------------------------------------

@dataclass
class PreparedData:
    graph: SensorGraph
    train: WindowedBatch
    val: WindowedBatch
    test: WindowedBatch
    normalizer: Normalizer


def data_paths(data_dir: str) -> Dict[str, str]:
    return {name: os.path.join(data_dir, f"{name}.csv") for name in ("stations", "segments", "speeds")}


def prepare_data(cfg: RunConfig, data_dir: Optional[str] = None) -> PreparedData:
    paths = data_paths(data_dir or cfg.data_dir)
    for path in paths.values():
        if not os.path.isfile(path):
            raise FileNotFoundError(f"missing input file {path}")
    graph = load_graph(paths["stations"], paths["segments"], cfg.omega)
    series = clean_series(load_series(paths["speeds"], graph, cfg.step_minutes), cfg.day_threshold)
    if series.node_ids != graph.node_ids:
        graph = restrict_graph(graph, series.node_ids)
    windows = make_windows(series, cfg.history_steps, cfg.horizon_steps, cfg.stride)
    train_set, val_set, test_set = split(windows, cfg.split)
    logger.info("Windows: %d train, %d val, %d test over %d stations",
                len(train_set), len(val_set), len(test_set), graph.num_nodes)
    return PreparedData(graph, train_set, val_set, test_set, Normalizer.fit(train_set))


def architecture(cfg: RunConfig, graph: SensorGraph) -> Architecture:
    return Architecture(
        mode=cfg.mode,
        num_nodes=graph.num_nodes,
        history_steps=cfg.history_steps,
        horizon_steps=cfg.horizon_steps,
        spatial_width=cfg.spatial_width,
        lstm_hidden=cfg.lstm_hidden,
        gat_heads=cfg.gat_heads,
        gat_slope=cfg.gat_slope,
        normalization=cfg.normalization,
    )


def train_from_config(cfg: RunConfig, data: PreparedData) -> Tuple[StgtModel, Optional[SparseState], pd.DataFrame]:
    """Dense training at sparsity 0, dynamic sparse training otherwise."""
    model = StgtModel.create(architecture(cfg, data.graph), data.graph, seed=cfg.seed)
    state = None
    if cfg.sparsity > 0:
        state = init_model_masks(model, cfg.sparsity, seed=cfg.seed, death_rate=cfg.death_rate,
                                 update_frequency=cfg.update_frequency,
                                 death_rate_schedule=cfg.death_rate_schedule)
    model, history = train(model, state, data.train, data.val, data.normalizer, epochs=cfg.epochs,
                           batch_size=cfg.batch_size, learning_rate=cfg.learning_rate, momentum=cfg.momentum,
                           seed=cfg.seed, mape_epsilon=cfg.mape_epsilon)
    return model, state, history


def flops_for(cfg: RunConfig, graph: SensorGraph) -> flops_accounting.FlopsModel:
    return flops_accounting.stgt_flops_model(architecture(cfg, graph), graph.num_edges,
                                             update_frequency=cfg.update_frequency, sparsity=cfg.sparsity)


def horizon_label(cfg: RunConfig) -> str:
    return f"{cfg.horizon_steps * cfg.step_minutes}min"


# --- commands -----------------------------------------------------------------------

def synth_config(cfg: RunConfig) -> synth_data.SynthConfig:
    return synth_data.SynthConfig(
        num_nodes=cfg.synth_nodes,
        topology=cfg.synth_topology,
        days=cfg.synth_days,
        amplitude=cfg.synth_amplitude,
        noise_std=cfg.synth_noise,
        step_minutes=cfg.step_minutes,
        omega=cfg.omega,
        seed=cfg.seed,
    )


def cmd_synth(args, cfg: RunConfig) -> int:
    synth_cfg = synth_config(cfg)
    synth_cfg.validate()
    run_dir = create_run_dir(cfg.output_dir, "synth", cfg)
    paths = synth_data.write_dataset(synth_cfg, cfg.data_dir, cfg.synth_shifts)
    with open(os.path.join(run_dir, ARTIFACTS["dataset"]), "w", encoding="utf-8") as f:
        json.dump(paths, f, indent=2)
    print(f"run: {run_dir}")
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    data = prepare_data(cfg)
    run_dir = create_run_dir(cfg.output_dir, "train", cfg)
    model, state, history = train_from_config(cfg, data)
    write_history(history, os.path.join(run_dir, "history.csv"))

    layers = sparsity_report(state) if state is not None else []
    save_checkpoint(os.path.join(run_dir, "checkpoint.json"), model,
                    masks=state.masks if state is not None else None, normalizer=data.normalizer,
                    extra={"config": cfg.as_dict(), "sparsity_layers": layers})

    report = forecast_metrics.evaluate(model, data.normalizer, data.test, period="TP0", eps=cfg.mape_epsilon)
    forecast_metrics.write_eval_reports([report], run_dir)
    export_reports(run_dir, [report], cfg, checkpoint=os.path.join(run_dir, "checkpoint.json"))
    flops_accounting.write_flops_report(
        flops_accounting.flops_report(flops_for(cfg, data.graph), layers or None),
        os.path.join(run_dir, "flops-report.json"),
    )
    print(f"run: {run_dir}")
    print(f"test MAE {report.mae:.3f}  RMSE {report.rmse:.3f}  MAPE {report.mape:.2f}%")
    return EXIT_OK


def parse_periods(text: Optional[str], data_dir: str) -> List[Tuple[str, str]]:
    """'TAG=path,...' (paths relative to data_dir); default: every known period file present."""
    if not text:
        found = [(tag, os.path.join(data_dir, name)) for tag, name in PERIOD_FILES
                 if os.path.isfile(os.path.join(data_dir, name))]
        if not found:
            raise FileNotFoundError(f"no period files found in {data_dir}")
        return found
    periods = []
    for item in text.split(","):
        tag, sep, path = item.partition("=")
        if not sep or not tag.strip() or not path.strip():
            raise ConfigError(f"period '{item}' must look like TAG=path")
        path = path.strip()
        periods.append((tag.strip(), path if os.path.isabs(path) else os.path.join(data_dir, path)))
    return periods


def period_windows(path: str, graph: SensorGraph, cfg: RunConfig, test_only: bool) -> WindowedBatch:
    series = clean_series(load_series(path, graph, cfg.step_minutes), cfg.day_threshold)
    windows = make_windows(series, cfg.history_steps, cfg.horizon_steps, cfg.stride)
    if test_only:
        return split(windows, cfg.split)[2]
    return windows


def evaluate_checkpoint(path: str, cfg: RunConfig) -> List[forecast_metrics.EvalReport]:
    model, _, normalizer, extra = load_checkpoint(path)
    if "config" in extra:
        # window geometry comes from the checkpoint, paths and eval settings from the caller
        trained = extra["config"]
        cfg = apply_overrides(cfg, {k: trained[k] for k in ("history_steps", "horizon_steps", "step_minutes")})
    periods = parse_periods(cfg.periods, cfg.data_dir)
    training_speeds = os.path.abspath(data_paths(cfg.data_dir)["speeds"])
    batches = [
        (tag, period_windows(p, model.graph, cfg, test_only=os.path.abspath(p) == training_speeds))
        for tag, p in periods
    ]
    return forecast_metrics.evaluate_transfer(model, normalizer, batches, eps=cfg.mape_epsilon)


def cmd_eval(args, cfg: RunConfig) -> int:
    if not cfg.checkpoints:
        raise ConfigError("eval needs at least one checkpoint (--checkpoint or 'checkpoints' in the config)")
    reports: List[forecast_metrics.EvalReport] = []
    modes: Dict[str, str] = {}
    for path in cfg.checkpoints:
        found = evaluate_checkpoint(path, cfg)
        mode = found[0].mode if found else ""
        if mode in modes:
            raise ConfigError(f"checkpoints {modes[mode]} and {path} are both {mode} models")
        modes[mode] = path
        reports.extend(found)
    run_dir = create_run_dir(cfg.output_dir, "eval", cfg)
    forecast_metrics.write_eval_reports(reports, run_dir)
    export_reports(run_dir, reports, cfg, checkpoint=", ".join(cfg.checkpoints))
    print(f"run: {run_dir}")
    for rep in reports:
        print(f"{rep.mode} {rep.period}: MAE {rep.mae:.3f}  RMSE {rep.rmse:.3f}  MAPE {rep.mape:.2f}%")
    return EXIT_OK


def sweep_point(cfg_dict: dict, sparsity: float) -> dict:
    """One sweep row; module-level so worker processes can run it."""
    cfg = apply_overrides(RunConfig(), dict(cfg_dict, sparsity=sparsity))
    data = prepare_data(cfg)
    model, _, _ = train_from_config(cfg, data)
    report = forecast_metrics.evaluate(model, data.normalizer, data.test, period="TP0", eps=cfg.mape_epsilon)
    return {
        "sparsity": sparsity,
        "mode": cfg.mode,
        "horizon": horizon_label(cfg),
        "mae": report.mae,
        "rmse": report.rmse,
        "mape": report.mape,
        "flops_ratio": flops_accounting.sparse_ratio(sparsity, cfg.update_frequency),
    }


def sweep_grid(cfg: RunConfig) -> List[float]:
    return list(cfg.sweep_grid) if cfg.sweep_grid else [0.0] + list(SPARSITY_GRID)


def run_sweep(cfg: RunConfig, grid: Sequence[float], parallel: int = 1) -> pd.DataFrame:
    cfg_dict = cfg.as_dict()
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(sweep_point, [cfg_dict] * len(grid), grid))
    else:
        rows = []
        for d in grid:
            logger.info("Sweep point sparsity=%g", d)
            rows.append(sweep_point(cfg_dict, d))
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def cmd_sweep(args, cfg: RunConfig) -> int:
    grid = sweep_grid(cfg)
    run_dir = create_run_dir(cfg.output_dir, "sweep", cfg)
    table = run_sweep(cfg, grid, cfg.parallel)
    path = os.path.join(run_dir, "sweep.csv")
    table.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
    print(f"run: {run_dir}")
    print(table.to_string(index=False))
    return EXIT_OK


def cmd_flops(args, cfg: RunConfig) -> int:
    if cfg.flops_nodes > 0:
        # GAT neighbourhood size needs the edge count; default to a bidirectional line
        edges = cfg.flops_edges if cfg.flops_edges >= 0 else 2 * (cfg.flops_nodes - 1)
        arch = Architecture(mode=cfg.mode, num_nodes=cfg.flops_nodes, history_steps=cfg.history_steps,
                            horizon_steps=cfg.horizon_steps, spatial_width=cfg.spatial_width,
                            lstm_hidden=cfg.lstm_hidden, gat_heads=cfg.gat_heads, gat_slope=cfg.gat_slope,
                            normalization=cfg.normalization)
        model = flops_accounting.stgt_flops_model(arch, edges, cfg.update_frequency, cfg.sparsity)
    else:
        paths = data_paths(cfg.data_dir)
        model = flops_for(cfg, load_graph(paths["stations"], paths["segments"], cfg.omega))
    report = flops_accounting.flops_report(model)
    report["ratio_table"] = [{"sparsity": d, "ratio": r}
                             for d, r in flops_accounting.ratio_table(SPARSITY_GRID, cfg.update_frequency)]
    run_dir = create_run_dir(cfg.output_dir, "flops", cfg)
    flops_accounting.write_flops_report(report, os.path.join(run_dir, "flops-report.json"))
    print(f"run: {run_dir}")
    print(f"dense f_d {report['dense_flops']:.6g}  amortized/iter {report['amortized_training_flops']:.6g}  "
          f"ratio {report['ratio']:.5f}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "flops": cmd_flops}


# --- argument parsing ---------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--data", dest="data_dir", help="directory with stations.csv, segments.csv, speeds.csv")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--mode", choices=("gcn", "gat"))
    p.add_argument("--history", dest="history_steps", type=int, help="F, input steps per window")
    p.add_argument("--horizon", help="T_out as minutes (45min) or steps (9)")
    p.add_argument("--stride", type=int)
    p.add_argument("--step-minutes", dest="step_minutes", type=int)
    p.add_argument("--sparsity", type=float)
    p.add_argument("--death-rate", dest="death_rate", type=float)
    p.add_argument("--death-rate-schedule", dest="death_rate_schedule", choices=("constant", "cosine"))
    p.add_argument("--update-frequency", dest="update_frequency", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--omega", type=float)
    p.add_argument("--normalization", choices=("sym", "row"))
    p.add_argument("--spatial-width", dest="spatial_width", type=int)
    p.add_argument("--lstm-hidden", dest="lstm_hidden", type=int)
    p.add_argument("--gat-heads", dest="gat_heads", type=int)
    p.add_argument("--split", help="train,val,test ratios, e.g. 0.7,0.1,0.2")
    p.add_argument("--day-threshold", dest="day_threshold", type=float)
    p.add_argument("--mape-epsilon", dest="mape_epsilon", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stgt_cli", description="Sparse spatio-temporal GNN traffic forecasting")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    _add_config_flags(p)
    p.add_argument("--out", dest="data_dir", help="output directory (same as --data)")
    p.add_argument("--nodes", dest="synth_nodes", type=int, help="station count (default 20)")
    p.add_argument("--topology", dest="synth_topology", choices=synth_data.TOPOLOGIES)
    p.add_argument("--days", dest="synth_days", type=int, help="days of data (default 14)")
    p.add_argument("--amplitude", dest="synth_amplitude", type=float, help="rush-hour speed drop (default 25)")
    p.add_argument("--noise", dest="synth_noise", type=float, help="noise std (default 1)")
    p.add_argument("--shifts", dest="synth_shifts",
                   help=f"comma-separated shifted periods: {', '.join(synth_data.SHIFTS[1:])}")

    p = sub.add_parser("train", help="train a model and evaluate it on the test split")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="zero-shot evaluation of checkpoints on one or more periods")
    _add_config_flags(p)
    p.add_argument("--checkpoint", dest="checkpoints", action="append",
                   help="checkpoint to evaluate; repeat for a GCN and a GAT model")
    p.add_argument("--periods", help="TAG=path,... (default: speeds*.csv found in the data directory)")

    p = sub.add_parser("sweep", help="train across a sparsity grid")
    _add_config_flags(p)
    p.add_argument("--grid", dest="sweep_grid", help="comma-separated sparsities (default: 0 plus the standard grid)")
    p.add_argument("--parallel", type=int, help="worker processes (default 1, sequential)")

    p = sub.add_parser("flops", help="analytic FLOPs report without training")
    _add_config_flags(p)
    p.add_argument("--nodes", dest="flops_nodes", type=int, help="station count instead of reading the graph")
    p.add_argument("--edges", dest="flops_edges", type=int, help="directed edge count when --nodes is given")
    return parser


OVERRIDE_KEYS = [f.name for f in fields(RunConfig) if f.name != "horizon_steps"]


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, {k: getattr(args, k, None) for k in OVERRIDE_KEYS})
    if args.horizon is not None:
        cfg = apply_overrides(cfg, {"horizon_steps": parse_horizon(args.horizon, cfg.step_minutes)})
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except Exception as e:
        category = error_category(e)
        if category is None:
            raise
        logger.debug("command failed", exc_info=True)
        print(f"error[{category}]: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
