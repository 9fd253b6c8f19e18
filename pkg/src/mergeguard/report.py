"""Report emission: key-sorted JSON and a one-row-per-run CSV."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

from .defense import ExperimentReport

CSV_COLUMNS = (
    "attack",
    "defense",
    "test_acc_trojaned",
    "asr_trojaned",
    "test_acc_defended",
    "asr_defended",
    "params_before",
    "params_after",
    "cr",
)


def _clean(obj):
    # NaN and inf are not JSON; report them as null
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def report_json(report, include_timing=False):
    """Schema-stable JSON text; wall-clock time is left out unless requested."""
    d = report.to_dict(include_timing) if isinstance(report, ExperimentReport) else report
    return json.dumps(_clean(d), sort_keys=True, indent=2, allow_nan=False) + "\n"


def csv_row(report):
    cr = report.cr
    return {
        "attack": report.attack,
        "defense": report.method,
        "test_acc_trojaned": report.trojaned.test_acc,
        "asr_trojaned": report.trojaned.asr,
        "test_acc_defended": report.defended.test_acc,
        "asr_defended": report.defended.asr,
        "params_before": report.params_before,
        "params_after": report.params_after,
        "cr": "" if cr is None else cr,
    }


def report_csv(reports):
    if isinstance(reports, ExperimentReport):
        reports = [reports]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in csv_row(r).items()})
    return buf.getvalue()


def emit_report(report, path, fmt="json"):
    """Write one report (or, for CSV, a list of reports) to ``path``."""
    if fmt == "json":
        text = report_json(report)
    elif fmt == "csv":
        text = report_csv(report)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    Path(path).write_text(text)
    return Path(path)


def load_report(path):
    return ExperimentReport.from_dict(json.loads(Path(path).read_text()))


def write_outputs(report, out_dir, figures=True):
    """report.json, report.csv, timing.json and (optionally) PNG figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [emit_report(report, out / "report.json"), emit_report(report, out / "report.csv", "csv")]
    (out / "timing.json").write_text(json.dumps({"seconds": report.seconds}, indent=2) + "\n")
    if figures:
        from .plotting import render_figures

        written += render_figures(report, out)
    return written
