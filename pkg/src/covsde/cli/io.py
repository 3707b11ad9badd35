"""Record files with embedded configuration.

CSV: header row, one row per record, then the resolved configuration as
trailing ``# key=value`` lines. JSON: ``{"config": ..., "records": [...]}``.
Floats are written with ``repr`` (shortest round-trip form).
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path


def format_value(x) -> str:
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, int):
        return str(x)
    if isinstance(x, float) or hasattr(x, "__float__") and not isinstance(x, str):
        return repr(float(x))
    return str(x)


def _json_value(x):
    if isinstance(x, (bool, int, str)) or x is None:
        return x
    if hasattr(x, "__float__"):
        f = float(x)
        # JSON has no NaN/inf; keep them as strings so the file stays valid
        return f if math.isfinite(f) else repr(f)
    if isinstance(x, (list, tuple)):
        return [_json_value(v) for v in x]
    return str(x)


def write_records(path, columns, records, config: dict, fmt: str = "csv") -> Path:
    """Write ``records`` (dicts keyed by ``columns``); returns the written path."""
    path = Path(path)
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown format {fmt!r}")
    path = path.with_suffix("." + fmt)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for rec in records:
                writer.writerow([format_value(rec[c]) for c in columns])
            for key in sorted(config):
                fh.write(f"# {key}={format_value(config[key])}\n")
    else:
        payload = {
            "config": {k: _json_value(v) for k, v in sorted(config.items())},
            "columns": list(columns),
            "records": [{c: _json_value(rec[c]) for c in columns} for rec in records],
        }
        path.write_text(json.dumps(payload, indent=1) + "\n")
    return path


def write_json(path, payload: dict, config: dict) -> Path:
    path = Path(path).with_suffix(".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {"config": {k: _json_value(v) for k, v in sorted(config.items())}}
    body.update({k: _json_value(v) for k, v in payload.items()})
    path.write_text(json.dumps(body, indent=1) + "\n")
    return path


def read_config(path) -> dict:
    """Parse ``key=value`` lines; ``# key=value`` lines of a previous output work too.

    A JSON output file is also accepted (its ``config`` object is used).
    Values are returned as strings.
    """
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return {k: str(v) for k, v in json.loads(text).get("config", {}).items()}
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if line.startswith("#"):
            line = line[1:].strip()
        if "=" not in line or "," in line.split("=", 1)[0]:
            continue
        key, value = line.split("=", 1)
        key = key.strip()
        if key.isidentifier():
            out[key] = value.strip()
    return out


def read_records(path) -> tuple[list[str], list[dict]]:
    """Read back a CSV written by :func:`write_records` (values as strings)."""
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    return header, [dict(zip(header, row)) for row in reader]
