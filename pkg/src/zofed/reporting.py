"""Metrics files: canonical CSV plus a JSON summary."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Optional

from .errors import ConfigError
from .federation import METRIC_COLUMNS, RoundMetrics


def _ensure_dir(output_dir) -> Path:
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory: {exc}", key="output_dir") from None
    return out


def write_metrics_csv(rows: Iterable[RoundMetrics], path) -> list:
    rows = list(rows)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for r in rows:
            writer.writerow([_fmt(getattr(r, c)) for c in METRIC_COLUMNS])
    return rows


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


def summarize(rows, config_hash: Optional[str] = None, extra: Optional[dict] = None) -> dict:
    rows = list(rows)
    summary = {"rounds": len(rows), "config_hash": config_hash}
    if rows:
        last = rows[-1]
        best = max(rows, key=lambda r: r.test_acc)
        summary.update(
            final_test_acc=last.test_acc,
            final_train_acc=last.train_acc,
            final_test_loss=last.test_loss,
            best_test_acc=best.test_acc,
            best_round=best.round,
            uplink_bytes_total=last.uplink_bytes_total,
            downlink_bytes_total=last.downlink_bytes_total,
            uplink_overhead_bytes=last.uplink_overhead_bytes,
        )
    if extra:
        summary.update(extra)
    return summary


def write_metrics(rows, output_dir, config_hash: Optional[str] = None, extra: Optional[dict] = None) -> dict:
    """Write ``metrics.csv`` and ``summary.json`` (EMA-parameter accuracies) into ``output_dir``."""
    out = _ensure_dir(output_dir)
    rows = write_metrics_csv(rows, out / "metrics.csv")
    summary = summarize(rows, config_hash, extra)
    write_json(summary, out / "summary.json")
    return summary


def write_json(obj, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def write_table_csv(rows: list, path, columns=None):
    """Write a list of flat dicts as CSV with a fixed column order."""
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def rows_as_dicts(rows) -> list:
    return [asdict(r) for r in rows]
