"""
Post-run report generation for training and evaluation runs.

- `metrics.txt`: one key=value record per (image, class), then one `aggregate` record.
- `metrics.csv`: the same per-image records as a table.
- `<report_root>/<run_id>/report.md`: summary, per-class table and loss curve, indexed in
  `<report_root>/index.{json,md}`.
"""

from __future__ import annotations

import json
import os
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import pandas as pd

from src.analysis.chart import plot_loss_curve
from src.analysis.metrics import ALL_METRICS, MetricsReport

METRICS_TXT = "metrics.txt"
METRICS_CSV = "metrics.csv"


def _to_dataframe(items: Iterable[Any]) -> pd.DataFrame:
    """
    Convert a list of SQLModel/Pydantic objects into a DataFrame.
    """
    data = [item.model_dump(mode="json") for item in items]
    return pd.DataFrame(data)


def markdown_table(df: pd.DataFrame, columns: list[str]) -> str:
    if df.empty:
        return "No data."
    subset = df[columns].astype(object).where(df[columns].notna(), "")
    headers = " | ".join(columns)
    divider = " | ".join(["---"] * len(columns))
    rows = [" | ".join(_cell(value) for value in row) for row in subset.values.tolist()]
    return "\n".join([headers, divider, *rows])


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def _ensure_dir(path: str) -> None:
    os.makedirs(path, exist_ok=True)


def _format_metric(value: Optional[float]) -> str:
    return "none" if value is None else f"{value:.6f}"


def metrics_records(report: MetricsReport) -> List[str]:
    """key=value lines: per-image records followed by the aggregate record."""
    lines = []
    for record in report.per_image:
        fields = ["record=image", f"image={record.image}", f"class={record.class_index}"]
        fields += [f"{m}={_format_metric(getattr(record, m))}" for m in ALL_METRICS]
        fields.append(f"excluded={'true' if record.excluded else 'false'}")
        lines.append(" ".join(fields))
    aggregate = ["record=aggregate", f"images={report.num_images}", f"excluded={report.excluded}"]
    aggregate += [f"{m}={_format_metric(report.mean.get(m))}" for m in ALL_METRICS]
    lines.append(" ".join(aggregate))
    return lines


def parse_metrics_records(path: str) -> List[Dict[str, str]]:
    """Read a `metrics.txt` back into one dict per record."""
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                records.append(dict(part.split("=", 1) for part in line.split()))
    return records


def write_metrics(report: MetricsReport, directory: str) -> Tuple[str, str]:
    """Write `metrics.txt` and `metrics.csv`; returns both paths."""
    _ensure_dir(directory)
    txt_path = os.path.join(directory, METRICS_TXT)
    with open(txt_path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(metrics_records(report)) + "\n")
    csv_path = os.path.join(directory, METRICS_CSV)
    _to_dataframe(report.per_image).to_csv(csv_path, index=False, float_format="%.6f")
    return txt_path, csv_path


def _class_table(report: MetricsReport) -> pd.DataFrame:
    rows = [{"class": c, **means} for c, means in report.class_means().items()]
    rows.append({"class": "mean", **report.mean})
    return pd.DataFrame(rows)


def generate_report(
    run_id: str,
    report_root: str,
    report: MetricsReport,
    losses: Sequence[float] = (),
    summary: Optional[Dict[str, Any]] = None,
) -> str:
    """
    Generate a report for a single run. Returns report directory path.

    Args:
        run_id: Run identifier (subdirectory name).
        report_root: Parent directory of all run reports.
        report: Final metrics.
        losses: Per-iteration training losses (curve omitted when empty).
        summary: Extra `key: value` facts listed in the summary section.
    """
    report_dir = os.path.join(report_root, run_id)
    _ensure_dir(report_dir)
    summary = dict(summary or {})

    plot_paths = {}
    curve = plot_loss_curve(losses, os.path.join(report_dir, "loss_curve.png"))
    if curve:
        plot_paths["loss_curve"] = os.path.relpath(curve, report_dir)

    report_lines = [f"# Run Report: {run_id}", "", "## Summary", ""]
    for key, value in summary.items():
        report_lines.append(f"- {key}: {value}")
    report_lines.append(f"- Images: {report.num_images}")
    report_lines.append(f"- Boundary exclusions (empty masks): {report.excluded}")
    if losses:
        report_lines.append(f"- Final loss: {losses[-1]:.4f}")
    report_lines.append("")

    report_lines += ["## Metrics", "", markdown_table(_class_table(report), ["class", *ALL_METRICS]), ""]

    if plot_paths.get("loss_curve"):
        report_lines += ["## Loss Curve", "", f"![Loss Curve]({plot_paths['loss_curve']})", ""]

    report_path = os.path.join(report_dir, "report.md")
    with open(report_path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(report_lines))

    _update_index(
        report_root,
        {
            "run_id": run_id,
            "generated_at": datetime.now(timezone.utc).isoformat(),
            "variant": summary.get("variant"),
            "dice": report.mean.get("dice"),
            "iou": report.mean.get("iou"),
            "report_path": os.path.relpath(report_path, report_root),
        },
    )
    return report_dir


def _update_index(report_root: str, summary: dict) -> None:
    index_json = os.path.join(report_root, "index.json")
    entries = []
    if os.path.exists(index_json):
        with open(index_json, "r", encoding="utf-8") as handle:
            entries = json.load(handle)
    entries = [e for e in entries if e.get("run_id") != summary["run_id"]]
    entries.append(summary)
    entries.sort(key=lambda x: x.get("run_id", ""), reverse=True)
    with open(index_json, "w", encoding="utf-8") as handle:
        json.dump(entries, handle, indent=2, sort_keys=True)

    index_lines = ["# Reports Index", ""]
    if entries:
        df = pd.DataFrame(entries)
        index_lines.append(markdown_table(df, ["run_id", "variant", "dice", "iou", "report_path"]))
    else:
        index_lines.append("No reports found.")

    index_md = os.path.join(report_root, "index.md")
    with open(index_md, "w", encoding="utf-8") as handle:
        handle.write("\n".join(index_lines))
