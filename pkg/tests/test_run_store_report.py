import datetime
import os

import pandas as pd
import pytest

import report_export
from config_manager import RunConfig
from forecast_metrics import EvalReport, write_eval_reports
from report_export import build_report_text, export_reports, generate_pdf_bytes
from run_store import create_run_dir, list_runs, load_run

FIXED = datetime.datetime(2024, 3, 1, 12, 30, 0)


def sample_reports():
    per_h = [{"step": 1, "minutes": 15, "mae": 1.0, "rmse": 1.5, "mape": 2.0},
             {"step": 2, "minutes": 30, "mae": 2.0, "rmse": 2.5, "mape": 4.0}]
    return [EvalReport(period="TP0", mode="GCN-STGT", mae=1.5, rmse=2.0, mape=3.0, per_horizon=per_h)]


def test_run_dir_names_are_unique(tmp_path):
    cfg = RunConfig(seed=3)
    first = create_run_dir(str(tmp_path), "train", cfg, now=FIXED)
    second = create_run_dir(str(tmp_path), "train", cfg, now=FIXED)
    assert os.path.basename(first) == "train-20240301-123000"
    assert os.path.basename(second) == "train-20240301-123000-1"
    assert load_run(first)["config"] == cfg


def test_list_and_load_runs(tmp_path):
    run = create_run_dir(str(tmp_path), "train", RunConfig(), now=FIXED)
    pd.DataFrame({"epoch": [1], "split": ["train"]}).to_csv(os.path.join(run, "history.csv"), index=False)
    write_eval_reports(sample_reports(), run)
    os.makedirs(os.path.join(str(tmp_path), "stray"))

    assert list_runs(str(tmp_path)) == [run]
    assert list_runs(str(tmp_path / "missing")) == []
    found = load_run(run)
    assert list(found["history"]["split"]) == ["train"]
    assert found["eval_json"][0]["period"] == "TP0"
    assert ("TP0", "mae") in found["eval_csv"].index
    with pytest.raises(FileNotFoundError):
        load_run(os.path.join(str(tmp_path), "stray"))


def test_report_text_lists_periods_and_horizons():
    text = build_report_text(sample_reports(), RunConfig(horizon_steps=2, step_minutes=15))
    assert "PERIOD TP0  [GCN-STGT]" in text
    assert "30min" in text
    assert "Horizon: 2 steps (30 min)" in text
    assert "No periods evaluated." in build_report_text([])


def test_export_reports_writes_text(tmp_path):
    written = export_reports(str(tmp_path), sample_reports())
    assert written[0].endswith("eval-report.txt")
    assert "MAPE" in (tmp_path / "eval-report.txt").read_text(encoding="utf-8")


def test_pdf_export():
    pytest.importorskip("reportlab")
    pdf = generate_pdf_bytes(build_report_text(sample_reports()) + "\n" + "x" * 300)
    assert pdf.startswith(b"%PDF")


def test_pdf_without_reportlab(monkeypatch):
    monkeypatch.setattr(report_export, "HAS_REPORTLAB", False)
    with pytest.raises(RuntimeError, match="reportlab"):
        generate_pdf_bytes("text")


def test_dashboard_helpers(tmp_path):
    pytest.importorskip("streamlit")
    import stgt_dashboard

    run = create_run_dir(str(tmp_path), "train", RunConfig(sparsity=0.5), now=FIXED)
    write_eval_reports(sample_reports(), run)
    overview = stgt_dashboard.run_overview(list_runs(str(tmp_path)))
    assert overview.loc[0, "sparsity"] == 0.5 and overview.loc[0, "mape"] == 3.0

    history = pd.DataFrame({"epoch": [1, 1, 2, 2], "split": ["train", "val"] * 2, "loss": [4, 3, 2, 1]})
    assert list(stgt_dashboard.final_epoch(history)["loss"]) == [2, 1]
