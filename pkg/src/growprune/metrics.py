"""Metrics CSV: a schema comment line, a header, one row per (method, update)."""

from __future__ import annotations

import csv
import io
from pathlib import Path

from .orchestrator import METRIC_COLUMNS, MetricsRow

SCHEMA_LINE = "# growprune-metrics schema=1"


def _cell(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_rows(rows, header=True):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        buf.write(SCHEMA_LINE + "\n")
        writer.writerow(METRIC_COLUMNS)
    for row in rows:
        d = row.as_dict() if isinstance(row, MetricsRow) else row
        writer.writerow([_cell(d[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def write_metrics(path, rows, append=False):
    """Write ``rows``; with ``append`` the header is only written to a new file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not (append and path.exists() and path.stat().st_size)
    with open(path, "a" if append else "w", newline="") as fh:
        fh.write(format_rows(rows, header=fresh))
    return path


class MetricsSink:
    """Callable that appends each row to a CSV file as it arrives."""

    def __init__(self, path):
        self.path = Path(path)
        write_metrics(self.path, [])

    def __call__(self, row):
        write_metrics(self.path, [row], append=True)


_INT = {"update", "parts", "n_train", "active_params", "total_params", "grad_eval_passes",
        "prune_iterations", "rollbacks"}
_FLOAT = {"data_fraction", "val_error", "test_error", "norm_epochs"}


def read_metrics(path):
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# growprune-metrics"):
        raise ValueError(f"{path}: missing metrics schema line")
    rows = []
    for rec in csv.DictReader(lines[1:]):
        for k in _INT:
            rec[k] = int(rec[k])
        for k in _FLOAT:
            rec[k] = float(rec[k])
        rec["recoverable"] = rec["recoverable"] == "true"
        rows.append(rec)
    return rows
