"""Report files: one JSON object per line, plus an optional CSV summary.

Both formats use the fixed column order of ``RECORD_FIELDS``. Fields that do
not apply to a record are null in JSONL and empty in CSV; list-valued cells
are written as JSON.
"""

from __future__ import annotations

import csv
import json
import os
from typing import Iterable

from .harness import RECORD_FIELDS

JSONL_NAME = "report.jsonl"
CSV_NAME = "summary.csv"

_INT = {"step", "stored_rows", "memory_bytes", "max_position_used", "prefill_macs", "decode_macs"}
_FLOAT = {"value_cosine_vs_reference", "attention_mass_sink", "attention_mass_past",
          "attention_mass_recent", "delta"}
_LIST = {"tokens", "cache_rows"}


def normalize(record: dict) -> dict:
    """Full record in stable field order; unknown keys are rejected."""
    extra = set(record) - set(RECORD_FIELDS)
    if extra:
        raise ValueError(f"unknown report fields: {sorted(extra)}")
    return {k: record.get(k) for k in RECORD_FIELDS}


def dumps_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(normalize(r), allow_nan=False) + "\n" for r in records)


def loads_jsonl(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def _cell(key: str, value) -> str:
    if value is None:
        return ""
    if key in _LIST:
        return json.dumps(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _uncell(key: str, text: str):
    if text == "":
        return None
    if key in _LIST:
        return json.loads(text)
    if key in _INT:
        return int(text)
    if key in _FLOAT:
        return float(text)
    if key == "passed":
        return text == "true"
    return text


def write_csv(records: Iterable[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            r = normalize(r)
            w.writerow([_cell(k, r[k]) for k in RECORD_FIELDS])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != RECORD_FIELDS:
        raise ValueError("unexpected CSV header")
    return [{k: _uncell(k, v) for k, v in zip(RECORD_FIELDS, row)} for row in rows[1:]]


def emit_report(records: list[dict], out_dir, fmt: str = "jsonl") -> list[str]:
    """Write ``report.jsonl`` (always) and, for ``fmt="csv"``, ``summary.csv``.

    Returns the paths written. Raises ``OSError`` if ``out_dir`` is unwritable.
    """
    if fmt not in ("jsonl", "csv"):
        raise ValueError(f"unknown report format {fmt!r}")
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, JSONL_NAME)]
    with open(paths[0], "w", encoding="utf-8") as f:
        f.write(dumps_jsonl(records))
    if fmt == "csv":
        paths.append(os.path.join(out_dir, CSV_NAME))
        write_csv(records, paths[1])
    return paths
