import json
import os

import pandas as pd
import pytest

from flops_accounting import sparse_ratio
from stgt_cli import main

TINY = ["--history", "4", "--horizon", "10min", "--spatial-width", "4", "--lstm-hidden", "5",
        "--batch-size", "64", "--epochs", "2", "--seed", "1"]


@pytest.fixture
def dataset(tmp_path):
    data = tmp_path / "data"
    code = main(["-q", "synth", "--out", str(data), "--nodes", "4", "--days", "2", "--seed", "1",
                 "--shifts", "seasonal-amplitude,demand-drop", "--output-dir", str(tmp_path / "synth-runs")])
    assert code == 0
    return data


def only_run(out_dir):
    (name,) = os.listdir(out_dir)
    return os.path.join(out_dir, name)


def test_synth_writes_files(dataset, tmp_path):
    names = sorted(os.listdir(dataset))
    assert names == ["segments.csv", "speeds-demand-drop.csv", "speeds-seasonal-amplitude.csv",
                     "speeds.csv", "stations.csv"]
    run = only_run(tmp_path / "synth-runs")
    saved = json.load(open(os.path.join(run, "config.json"), encoding="utf-8"))
    assert saved["synth_nodes"] == 4 and saved["synth_days"] == 2
    assert saved["synth_shifts"] == ["seasonal-amplitude", "demand-drop"]
    written = json.load(open(os.path.join(run, "dataset.json"), encoding="utf-8"))
    assert sorted(os.path.basename(p) for p in written.values()) == names


def test_synth_config_alone_regenerates_dataset(dataset, tmp_path):
    before = {name: (dataset / name).read_bytes() for name in os.listdir(dataset)}
    config = os.path.join(only_run(tmp_path / "synth-runs"), "config.json")
    for name in before:
        (dataset / name).unlink()
    assert main(["-q", "synth", "--config", config]) == 0
    assert {name: (dataset / name).read_bytes() for name in os.listdir(dataset)} == before


def test_train_then_eval(dataset, tmp_path):
    out = tmp_path / "runs"
    code = main(["-q", "train", "--data", str(dataset), "--output-dir", str(out), "--sparsity", "0.5",
                 "--update-frequency", "5"] + TINY)
    assert code == 0
    run = only_run(out)
    for name in ("config.json", "checkpoint.json", "history.csv", "eval-report.json", "eval-report.csv",
                 "eval-report.txt", "flops-report.json"):
        assert os.path.isfile(os.path.join(run, name)), name
    history = pd.read_csv(os.path.join(run, "history.csv"))
    assert len(history) == 4
    flops = json.load(open(os.path.join(run, "flops-report.json"), encoding="utf-8"))
    assert flops["ratio"] == pytest.approx(sparse_ratio(0.5, 5))
    assert len(flops["sparsity_layers"]) == 6

    eval_out = tmp_path / "eval-runs"
    code = main(["-q", "eval", "--checkpoint", os.path.join(run, "checkpoint.json"), "--data", str(dataset),
                 "--output-dir", str(eval_out)])
    assert code == 0
    reports = json.load(open(os.path.join(only_run(eval_out), "eval-report.json"), encoding="utf-8"))
    assert [r["period"] for r in reports] == ["TP0", "TP1", "TP2"]
    assert [h["minutes"] for h in reports[0]["per_horizon"]] == [5, 10]


def test_eval_reports_gcn_and_gat_side_by_side(dataset, tmp_path):
    checkpoints = []
    for mode in ("gcn", "gat"):
        out = tmp_path / f"runs-{mode}"
        code = main(["-q", "train", "--data", str(dataset), "--output-dir", str(out), "--mode", mode,
                     "--gat-heads", "2", "--sparsity", "0"] + TINY)
        assert code == 0
        checkpoints += ["--checkpoint", os.path.join(only_run(out), "checkpoint.json")]
    eval_out = tmp_path / "eval-runs"
    code = main(["-q", "eval", "--data", str(dataset), "--output-dir", str(eval_out)] + checkpoints)
    assert code == 0
    run = only_run(eval_out)
    table = pd.read_csv(os.path.join(run, "eval-report.csv"), index_col=[0, 1])
    for col in ("GCN-STGT 5min", "GCN-STGT 10min", "GCN-STGT all", "GAT-STGT 5min", "GAT-STGT 10min", "GAT-STGT all"):
        assert col in table.columns, col
    assert not table.isna().any().any()
    saved = json.load(open(os.path.join(run, "config.json"), encoding="utf-8"))
    assert saved["checkpoints"] == checkpoints[1::2]


def test_eval_rejects_two_checkpoints_of_one_mode(dataset, tmp_path, capsys):
    out = tmp_path / "runs"
    assert main(["-q", "train", "--data", str(dataset), "--output-dir", str(out), "--sparsity", "0"] + TINY) == 0
    path = os.path.join(only_run(out), "checkpoint.json")
    code = main(["-q", "eval", "--data", str(dataset), "--output-dir", str(tmp_path / "eval"),
                 "--checkpoint", path, "--checkpoint", path])
    assert code == 2
    assert capsys.readouterr().err.startswith("error[config]:")


def test_eval_without_checkpoint_is_a_config_error(dataset, tmp_path, capsys):
    assert main(["-q", "eval", "--data", str(dataset), "--output-dir", str(tmp_path / "eval")]) == 2
    assert capsys.readouterr().err.startswith("error[config]:")


def test_train_is_reproducible(dataset, tmp_path):
    args = ["-q", "train", "--data", str(dataset), "--sparsity", "0.5", "--update-frequency", "3"] + TINY
    assert main(args + ["--output-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--output-dir", str(tmp_path / "b")]) == 0
    first = open(os.path.join(only_run(tmp_path / "a"), "history.csv"), "rb").read()
    second = open(os.path.join(only_run(tmp_path / "b"), "history.csv"), "rb").read()
    assert first == second


def test_config_file_and_flags(dataset, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"mode": "gat", "gat_heads": 2, "sparsity": 0.0}), encoding="utf-8")
    out = tmp_path / "runs"
    code = main(["-q", "train", "--config", str(cfg_path), "--data", str(dataset), "--output-dir", str(out)] + TINY)
    assert code == 0
    saved = json.load(open(os.path.join(only_run(out), "config.json"), encoding="utf-8"))
    assert saved["mode"] == "gat" and saved["horizon_steps"] == 2 and saved["epochs"] == 2


def test_sweep_flops_column(dataset, tmp_path):
    out = tmp_path / "runs"
    code = main(["-q", "sweep", "--data", str(dataset), "--output-dir", str(out), "--grid", "0,0.5,0.9",
                 "--update-frequency", "4"] + TINY)
    assert code == 0
    table = pd.read_csv(os.path.join(only_run(out), "sweep.csv"))
    assert list(table.columns) == ["sparsity", "mode", "horizon", "mae", "rmse", "mape", "flops_ratio"]
    for d, ratio in zip(table["sparsity"], table["flops_ratio"]):
        assert ratio == pytest.approx(sparse_ratio(d, 4), rel=1e-9)
    assert set(table["horizon"]) == {"10min"}


def test_flops_command(tmp_path):
    out = tmp_path / "runs"
    assert main(["-q", "flops", "--nodes", "20", "--sparsity", "0.9", "--output-dir", str(out)]) == 0
    report = json.load(open(os.path.join(only_run(out), "flops-report.json"), encoding="utf-8"))
    assert report["ratio"] == pytest.approx(301.2 / 3003)
    assert len(report["ratio_table"]) == 13


def test_errors_are_categorised(tmp_path, capsys):
    code = main(["-q", "train", "--data", str(tmp_path / "nowhere"), "--output-dir", str(tmp_path / "runs")])
    assert code == 2
    assert capsys.readouterr().err.startswith("error[io]:")

    code = main(["-q", "train", "--sparsity", "1.5", "--output-dir", str(tmp_path / "runs")])
    assert code == 2
    assert capsys.readouterr().err.startswith("error[config]:")

    code = main(["-q", "train", "--horizon", "7min", "--output-dir", str(tmp_path / "runs")])
    assert code == 2
    assert "error[config]" in capsys.readouterr().err


def test_bad_data_is_a_data_error(dataset, tmp_path, capsys):
    (dataset / "segments.csv").write_text("from_id,to_id,distance_km\n700000,123,1.0\n", encoding="utf-8")
    code = main(["-q", "train", "--data", str(dataset), "--output-dir", str(tmp_path / "runs")] + TINY)
    assert code == 2
    assert capsys.readouterr().err.startswith("error[data]:")
