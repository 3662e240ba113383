"""
Sparse STGT run browser (Streamlit, read-only).

Usage:
  pip install -r requirements.txt
  streamlit run stgt_dashboard.py -- --runs runs

Shows the resolved config, training history, sweep and evaluation tables of
one run directory, and offers the evaluation report as TXT/PDF download.
"""
import argparse
import logging
import os
import sys
from typing import Dict, List, Optional

import pandas as pd
import streamlit as st

from forecast_metrics import load_eval_reports
from report_export import HAS_REPORTLAB, build_report_text, generate_pdf_bytes
from run_store import list_runs, load_run

logger = logging.getLogger("sparse_stgt.dashboard")


def final_epoch(history: pd.DataFrame) -> pd.DataFrame:
    """Last epoch's train and val rows."""
    if history.empty:
        return history
    return history[history["epoch"] == history["epoch"].max()].reset_index(drop=True)


def run_overview(runs: List[str]) -> pd.DataFrame:
    rows = []
    for path in runs:
        try:
            run = load_run(path)
        except Exception:
            logger.exception("Unreadable run directory %s", path)
            continue
        cfg = run["config"]
        row = {"run": os.path.basename(path), "mode": cfg.mode, "sparsity": cfg.sparsity,
               "horizon_steps": cfg.horizon_steps, "epochs": cfg.epochs}
        if "eval_json" in run and run["eval_json"]:
            first = run["eval_json"][0]
            row.update({"period": first["period"], "mae": first["mae"], "rmse": first["rmse"], "mape": first["mape"]})
        rows.append(row)
    return pd.DataFrame(rows)


def _report_text(run: Dict[str, object]) -> Optional[str]:
    if "eval_text" in run:
        return run["eval_text"]
    if "eval_json" in run:
        return build_report_text(load_eval_reports(os.path.join(run["path"], "eval-report.json")), run["config"])
    return None


def main(runs_dir: str) -> None:
    st.set_page_config(page_title="Sparse STGT - Runs", layout="wide")
    st.title("Sparse STGT - Training and Evaluation Runs")

    runs_dir = st.sidebar.text_input("Runs directory", value=runs_dir)
    runs = list_runs(runs_dir)
    if not runs:
        st.info(f"No runs found in {runs_dir}. Train a model with 'python stgt_cli.py train' first.")
        return

    st.subheader("All runs")
    st.dataframe(run_overview(runs), use_container_width=True)

    selected = st.sidebar.selectbox("Run", [os.path.basename(r) for r in runs])
    run = load_run(os.path.join(runs_dir, selected))
    st.sidebar.markdown(f"Selected: **{selected}**")

    st.subheader("Configuration")
    st.json(run["config"].as_dict())

    if "history" in run:
        st.subheader("Training history")
        st.dataframe(final_epoch(run["history"]), use_container_width=True)
        with st.expander("All epochs"):
            st.dataframe(run["history"], use_container_width=True)
    if "sweep" in run:
        st.subheader("Sparsity sweep")
        st.dataframe(run["sweep"], use_container_width=True)
    if "flops" in run:
        flops = run["flops"]
        st.subheader("Training FLOPs")
        col1, col2, col3 = st.columns(3)
        col1.metric("Dense f_d", f"{flops['dense_flops']:.4g}")
        col2.metric("Amortized per iteration", f"{flops['amortized_training_flops']:.4g}")
        col3.metric("Sparse / dense", f"{flops['ratio']:.4f}")
        st.dataframe(pd.DataFrame(flops["layers"]), use_container_width=True)
    if "eval_csv" in run:
        st.subheader("Evaluation")
        st.dataframe(run["eval_csv"], use_container_width=True)

    text = _report_text(run)
    if text:
        st.subheader("Report")
        st.code(text, language="text")
        col_a, col_b = st.columns(2)
        with col_a:
            st.download_button("Download TXT", data=text.encode("utf-8"),
                               file_name=f"{selected}-eval-report.txt", mime="text/plain")
        with col_b:
            if HAS_REPORTLAB:
                try:
                    st.download_button("Download PDF", data=generate_pdf_bytes(text),
                                       file_name=f"{selected}-eval-report.pdf", mime="application/pdf")
                except Exception as e:
                    st.error(f"PDF generation failed: {e}")
            else:
                st.caption("Install reportlab for PDF export.")


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    parser = argparse.ArgumentParser()
    parser.add_argument("--runs", default="runs")
    main(parser.parse_known_args(sys.argv[1:])[0].runs)
