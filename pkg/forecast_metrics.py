"""
forecast_metrics.py

MAE / RMSE / MAPE on raw (denormalized) speeds, and zero-shot evaluation of
a trained model on one or more time periods.

Report files:
  - eval-report.json : list of per-period reports with per-horizon breakdown
  - eval-report.csv  : rows = period x metric, columns = model mode x horizon
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

logger = logging.getLogger("sparse_stgt.metrics")

DEFAULT_MAPE_EPSILON = 1.0
METRICS = ("mae", "rmse", "mape")


class MetricError(ValueError):
    pass


def _pair(pred, truth) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise MetricError(f"prediction shape {pred.shape} does not match truth shape {truth.shape}")
    if pred.size == 0:
        raise MetricError("cannot score an empty prediction")
    return pred, truth


def mae(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def rmse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def mape(pred, truth, eps: float = DEFAULT_MAPE_EPSILON) -> float:
    """Percent; entries whose |truth| < eps are left out of the mean."""
    pred, truth = _pair(pred, truth)
    keep = np.abs(truth) >= eps
    if not keep.any():
        raise MetricError(f"every truth value is below the MAPE cut-off of {eps}")
    return float(100.0 * np.mean(np.abs(pred[keep] - truth[keep]) / np.abs(truth[keep])))


def score(pred, truth, eps: float = DEFAULT_MAPE_EPSILON) -> Dict[str, float]:
    return {"mae": mae(pred, truth), "rmse": rmse(pred, truth), "mape": mape(pred, truth, eps)}


@dataclass
class EvalReport:
    period: str
    mode: str
    mae: float
    rmse: float
    mape: float
    per_horizon: List[Dict[str, float]] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def predict_raw(model, normalizer, inputs: np.ndarray) -> np.ndarray:
    """Model predictions in mph for raw-speed input windows."""
    if normalizer is None:
        return model.predict(inputs)
    return normalizer.denormalize(model.predict(normalizer.normalize(inputs)))


def evaluate(model, normalizer, batch, period: str = "TP0", eps: float = DEFAULT_MAPE_EPSILON) -> EvalReport:
    arch = model.arch
    if tuple(batch.node_ids) != tuple(model.graph.node_ids):
        raise MetricError(f"period {period}: station set differs from the one the model was trained on")
    if batch.history_steps != arch.history_steps or batch.horizon_steps != arch.horizon_steps:
        raise MetricError(
            f"period {period}: windows are F={batch.history_steps}, T_out={batch.horizon_steps} "
            f"but the model expects F={arch.history_steps}, T_out={arch.horizon_steps}"
        )
    pred = predict_raw(model, normalizer, batch.inputs)
    truth = batch.targets
    overall = score(pred, truth, eps)
    per_horizon = []
    for step in range(arch.horizon_steps):
        row = {"step": step + 1, "minutes": (step + 1) * batch.step_minutes}
        row.update(score(pred[..., step], truth[..., step], eps))
        per_horizon.append(row)
    return EvalReport(period=period, mode=model.tag, per_horizon=per_horizon, **overall)


def evaluate_transfer(model, normalizer, periods: Sequence[Tuple[str, object]],
                      eps: float = DEFAULT_MAPE_EPSILON) -> List[EvalReport]:
    """Zero-shot: one report per (tag, WindowedBatch); parameters are never touched."""
    reports = []
    for tag, batch in periods:
        report = evaluate(model, normalizer, batch, period=tag, eps=eps)
        logger.info("%s on %s: MAE %.3f  RMSE %.3f  MAPE %.2f%%", report.mode, tag, report.mae, report.rmse, report.mape)
        reports.append(report)
    return reports


def reports_to_frame(reports: Sequence[EvalReport]) -> pd.DataFrame:
    """Rows = period x metric; columns = '<mode> <minutes>min' per horizon step plus '<mode> all'."""
    cells: Dict[Tuple[str, str], Dict[str, float]] = {}
    columns: List[str] = []
    seen = set()
    for rep in reports:
        if (rep.period, rep.mode) in seen:
            raise MetricError(f"two reports for {rep.mode} on period {rep.period}")
        seen.add((rep.period, rep.mode))
        for metric in METRICS:
            row = cells.setdefault((rep.period, metric), {})
            for h in rep.per_horizon:
                col = f"{rep.mode} {h['minutes']}min"
                row[col] = h[metric]
                if col not in columns:
                    columns.append(col)
            col = f"{rep.mode} all"
            row[col] = getattr(rep, metric)
            if col not in columns:
                columns.append(col)
    index = pd.MultiIndex.from_tuples(list(cells), names=["period", "metric"])
    return pd.DataFrame(list(cells.values()), index=index, columns=columns)


def write_eval_reports(reports: Sequence[EvalReport], out_dir: str, stem: str = "eval-report") -> Tuple[str, str]:
    json_path = os.path.join(out_dir, f"{stem}.json")
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump([r.as_dict() for r in reports], f, indent=2)
    if reports:
        reports_to_frame(reports).to_csv(csv_path, float_format="%.6f", lineterminator="\n")
    else:
        with open(csv_path, "w", encoding="utf-8") as f:
            f.write("period,metric\n")
    return json_path, csv_path


def load_eval_reports(path: str) -> List[EvalReport]:
    with open(path, "r", encoding="utf-8") as f:
        return [EvalReport(**item) for item in json.load(f)]


def degradation(reports: Sequence[EvalReport], baseline: Optional[str] = "TP0", metric: str = "mape") -> Dict[str, float]:
    """Metric of every period minus the baseline period's, to rank how well a model transfers."""
    by_period = {r.period: getattr(r, metric) for r in reports}
    if baseline not in by_period:
        raise MetricError(f"baseline period {baseline} is not among the reports")
    return {p: v - by_period[baseline] for p, v in by_period.items() if p != baseline}
