"""
run_store.py

Every command writes into its own run directory:

  <output_dir>/<command>-YYYYmmdd-HHMMSS[-n]/
      config.json        resolved configuration
      checkpoint.json    (train)
      history.csv        (train)
      eval-report.json / .csv / .txt / .pdf
      sweep.csv          (sweep)
      flops-report.json  (train, flops)
      dataset.json       files written (synth)
"""

import datetime
import json
import logging
import os
from typing import Dict, List, Optional

import pandas as pd

from config_manager import RunConfig, load_config, save_config

logger = logging.getLogger("sparse_stgt.runs")

ARTIFACTS = {
    "history": "history.csv",
    "sweep": "sweep.csv",
    "eval_json": "eval-report.json",
    "eval_csv": "eval-report.csv",
    "eval_text": "eval-report.txt",
    "eval_pdf": "eval-report.pdf",
    "flops": "flops-report.json",
    "checkpoint": "checkpoint.json",
    "dataset": "dataset.json",
}


def create_run_dir(output_dir: str, command: str, cfg: RunConfig, now: Optional[datetime.datetime] = None) -> str:
    now = now or datetime.datetime.now()
    os.makedirs(output_dir, exist_ok=True)
    base = f"{command}-{now.strftime('%Y%m%d-%H%M%S')}"
    path = os.path.join(output_dir, base)
    n = 1
    while os.path.exists(path):
        path = os.path.join(output_dir, f"{base}-{n}")
        n += 1
    os.makedirs(path)
    save_config(cfg, os.path.join(path, "config.json"))
    logger.info("Run directory %s", path)
    return path


def list_runs(output_dir: str) -> List[str]:
    """Run directories (those holding a config.json), newest name first."""
    if not os.path.isdir(output_dir):
        return []
    runs = [
        os.path.join(output_dir, name)
        for name in os.listdir(output_dir)
        if os.path.isfile(os.path.join(output_dir, name, "config.json"))
    ]
    return sorted(runs, reverse=True)


def load_run(run_dir: str) -> Dict[str, object]:
    """Whatever artefacts exist: config as RunConfig, tables as DataFrames, JSON as dicts, others as paths."""
    if not os.path.isfile(os.path.join(run_dir, "config.json")):
        raise FileNotFoundError(f"{run_dir} is not a run directory (no config.json)")
    found: Dict[str, object] = {"path": run_dir, "config": load_config(os.path.join(run_dir, "config.json"))}
    for key, name in ARTIFACTS.items():
        path = os.path.join(run_dir, name)
        if not os.path.isfile(path):
            continue
        if key in ("history", "sweep"):
            found[key] = pd.read_csv(path)
        elif key == "eval_csv":
            found[key] = pd.read_csv(path, index_col=[0, 1])
        elif key in ("eval_json", "flops", "dataset"):
            with open(path, "r", encoding="utf-8") as f:
                found[key] = json.load(f)
        elif key == "eval_text":
            with open(path, "r", encoding="utf-8") as f:
                found[key] = f.read()
        else:
            found[key] = path
    return found
