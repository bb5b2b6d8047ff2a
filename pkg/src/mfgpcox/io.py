"""CSV/JSON readers and writers for datasets, models and predictions.

Floats are written with ``repr`` (shortest round-trip form) so files are
byte-stable and lossless.
"""

import csv
import io as _io
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .exceptions import ContractError

UNITS_HEADER = ["unit_id", "failure_mode", "event_time", "event_indicator"]
SIGNALS_HEADER = ["unit_id", "sensor_id", "time", "value"]


def fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def to_csv(header, rows):
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def units_csv(rows):
    return to_csv(UNITS_HEADER, rows)


def signals_csv(rows):
    return to_csv(SIGNALS_HEADER, rows)


def read_csv(path):
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            return list(csv.DictReader(fh))
    except FileNotFoundError:
        raise FileNotFoundError(f"missing data file: {path}") from None


def read_units(path):
    """``{unit_id: dict(failure_mode, event_time, event_indicator)}`` in file order."""
    units = {}
    for row in read_csv(path):
        mode = row.get("failure_mode", "")
        units[row["unit_id"]] = {
            "failure_mode": int(mode) if mode not in ("", None) else None,
            "event_time": float(row["event_time"]),
            "event_indicator": int(row["event_indicator"]),
            "x": np.array([float(row[k]) for k in row if k.startswith("x")], float),
        }
    return units


def read_signals(path, n_sensors=None):
    """``{unit_id: [(times, values) per sensor]}`` with each series sorted by time."""
    raw = {}
    for row in read_csv(path):
        raw.setdefault(row["unit_id"], {}).setdefault(int(row["sensor_id"]), []).append(
            (float(row["time"]), float(row["value"])))
    if n_sensors is None:
        n_sensors = 1 + max((max(s) for s in raw.values()), default=-1)
    out = {}
    for uid, sensors in raw.items():
        if max(sensors) >= n_sensors:
            raise ContractError(f"unit {uid!r} has sensor id {max(sensors)} >= {n_sensors}")
        series = []
        for j in range(n_sensors):
            pts = sorted(sensors.get(j, []))
            series.append((np.array([p[0] for p in pts]), np.array([p[1] for p in pts])))
        out[uid] = series
    return out


def write_files_atomic(out_dir, files):
    """Write ``{relative path: text}`` under ``out_dir`` all-or-nothing.

    Everything is staged in a temporary sibling directory first; files are
    moved into place only after every one was written.
    """
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".stage-", dir=out_dir.parent))
    try:
        for rel, text in files.items():
            p = stage / rel
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(text)
        out_dir.mkdir(parents=True, exist_ok=True)
        for rel in files:
            dest = out_dir / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            os.replace(stage / rel, dest)
    finally:
        shutil.rmtree(stage, ignore_errors=True)
