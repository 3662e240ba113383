"""
report_export.py

Plain-text and PDF renderings of an evaluation: one block per period with
the overall metrics and the per-horizon breakdown.

reportlab is optional; without it only the text report is written.
"""

import datetime
import io
import logging
import os
from typing import List, Optional, Sequence

# PDF libs
try:
    from reportlab.lib.pagesizes import A4
    from reportlab.pdfgen import canvas
    HAS_REPORTLAB = True
except Exception:
    HAS_REPORTLAB = False

from config_manager import RunConfig
from forecast_metrics import EvalReport

logger = logging.getLogger("sparse_stgt.report")

PDF_TITLE = "SPARSE STGT - EVALUATION REPORT"


def build_report_text(reports: Sequence[EvalReport], cfg: Optional[RunConfig] = None,
                      checkpoint: Optional[str] = None) -> str:
    lines = [
        "EVALUATION REPORT",
        f"Generated: {datetime.datetime.now().strftime('%Y-%m-%d %H:%M:%S')}",
    ]
    if checkpoint:
        lines.append(f"Checkpoint: {checkpoint}")
    if cfg is not None:
        lines += [
            f"Mode: {cfg.mode}   History: {cfg.history_steps} steps   Horizon: {cfg.horizon_steps} steps "
            f"({cfg.horizon_steps * cfg.step_minutes} min)",
            f"Sparsity: {cfg.sparsity}   Death rate: {cfg.death_rate} ({cfg.death_rate_schedule})   "
            f"Update frequency: {cfg.update_frequency}   Seed: {cfg.seed}",
        ]
    for rep in reports:
        lines += [
            "",
            f"PERIOD {rep.period}  [{rep.mode}]",
            f"  MAE  {rep.mae:8.3f} mph",
            f"  RMSE {rep.rmse:8.3f} mph",
            f"  MAPE {rep.mape:8.3f} %",
            f"  {'horizon':>8} {'MAE':>8} {'RMSE':>8} {'MAPE':>8}",
        ]
        for h in rep.per_horizon:
            lines.append(f"  {str(h['minutes']) + 'min':>8} {h['mae']:8.3f} {h['rmse']:8.3f} {h['mape']:8.3f}")
    if not reports:
        lines += ["", "No periods evaluated."]
    return "\n".join(lines)


def generate_pdf_bytes(text: str) -> bytes:
    if not HAS_REPORTLAB:
        raise RuntimeError("reportlab not installed; cannot generate PDF. Install with 'pip install reportlab'.")
    buffer = io.BytesIO()
    c = canvas.Canvas(buffer, pagesize=A4)
    width, height = A4
    y = height - 60
    c.setFont("Helvetica-Bold", 14)
    c.drawString(40, y, PDF_TITLE)
    y -= 30
    c.setFont("Courier", 9)
    for line in text.splitlines():
        max_chars = 95
        while True:
            if y < 60:
                c.showPage()
                c.setFont("Courier", 9)
                y = height - 60
            if len(line) <= max_chars:
                break
            c.drawString(40, y, line[:max_chars])
            y -= 12
            line = line[max_chars:]
        c.drawString(40, y, line)
        y -= 12
    c.showPage()
    c.save()
    return buffer.getvalue()


def export_reports(run_dir: str, reports: Sequence[EvalReport], cfg: Optional[RunConfig] = None,
                   checkpoint: Optional[str] = None) -> List[str]:
    """Write eval-report.txt and, when reportlab is available, eval-report.pdf."""
    text = build_report_text(reports, cfg, checkpoint)
    written = []
    text_path = os.path.join(run_dir, "eval-report.txt")
    with open(text_path, "w", encoding="utf-8") as f:
        f.write(text + "\n")
    written.append(text_path)
    if HAS_REPORTLAB:
        pdf_path = os.path.join(run_dir, "eval-report.pdf")
        try:
            with open(pdf_path, "wb") as f:
                f.write(generate_pdf_bytes(text))
            written.append(pdf_path)
        except Exception:
            logger.exception("Failed to write PDF report")
    return written
