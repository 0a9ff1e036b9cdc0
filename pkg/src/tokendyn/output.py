"""CSV and JSON sidecar emission.

CSV files use commas, ``.`` as decimal separator, UNIX newlines, a header
row, and 17 significant digits for reals so every float round-trips.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
import math
from pathlib import Path

import numpy as np

from .experiments import ExperimentResult

PROVENANCE = ("experiment", "master_seed", "trial", "config_hash", "stat")


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".17g")
    return str(value)


def _columns(rows) -> list[str]:
    cols = list(PROVENANCE)
    seen = set(cols)
    for row in rows:
        for key in row:
            if key not in seen:
                seen.add(key)
                cols.append(key)
    return cols


def write_csv(result: ExperimentResult, path, timestamp: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = _columns(result.rows)
    with path.open("w", newline="") as fh:
        if timestamp:
            now = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
            fh.write(f"# generated {now}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for row in result.rows:
            writer.writerow([format_value(row.get(c)) for c in cols])
    return path


def _jsonable(obj):
    if hasattr(obj, "as_dict"):
        return _jsonable(obj.as_dict())
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_sidecar(result: ExperimentResult, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {
        "experiment": result.experiment,
        "config_hash": result.config_hash,
        "config": result.config,
        "fits": _jsonable(result.fits),
        "summary": _jsonable(result.summary),
    }
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def write_outputs(result: ExperimentResult, out_dir, timestamp: bool = True) -> tuple[Path, Path]:
    """Write ``<experiment>.csv`` and ``<experiment>.json`` into ``out_dir``."""
    out = Path(out_dir)
    return (
        write_csv(result, out / f"{result.experiment}.csv", timestamp),
        write_sidecar(result, out / f"{result.experiment}.json"),
    )
