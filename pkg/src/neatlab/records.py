"""Run outputs: per-epoch metrics CSV and a JSON run record.

Both are deterministic given (config, seed).  Timestamps and wall-clock
durations live only in the record's ``timing`` section, and never in the CSV,
so reruns can be compared byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import platform
import time
from pathlib import Path

import numpy as np

from . import __version__

SCHEMA_VERSION = 1
METRIC_COLUMNS = ("seed", "arm", "epoch", "split", "loss", "accuracy")


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def metrics_csv(runs) -> str:
    """CSV text for an iterable of RunMetrics, rows in the given run order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for m in runs:
        for epoch, split, loss, acc in m.rows():
            w.writerow([m.seed, m.arm, epoch, split, _fmt(loss), _fmt(acc)])
    return buf.getvalue()


def write_text(path, text: str) -> str:
    data = text.encode("utf-8")
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return repr(x)
    return x


def dumps(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n"


def run_record(command: str, config: dict, results: dict, theory: dict | None = None,
               artifacts: dict | None = None, base_checksums: dict | None = None,
               wall_clock: float | None = None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "command": command,
        "config": config,
        "results": results,
        "theory": theory or {},
        "artifacts": artifacts or {},
        "base_checksums": base_checksums or {},
        "timing": {
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "wall_clock_seconds": wall_clock,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
    }


def strip_timing(record: dict) -> dict:
    """Record without its volatile fields, for rerun comparisons."""
    out = dict(record)
    out.pop("timing", None)
    return out
