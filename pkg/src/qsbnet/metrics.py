"""Canonical serialization of metrics reports.

Keys are sorted and floats are written with exactly six decimals, so two
identical runs produce byte-identical files on any platform.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any

import numpy as np

from .errors import InvariantViolation

FLOAT_FORMAT = "{:.6f}"


def _encode(value: Any, where: str, indent: int, level: int) -> str:
    pad = "\n" + " " * (indent * (level + 1))
    end = "\n" + " " * (indent * level)
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if value is None:
        return "null"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if not math.isfinite(value):
            raise InvariantViolation(f"non-finite metric at {where or '<root>'}: {value}")
        text = FLOAT_FORMAT.format(float(value))
        return "0.000000" if text == "-0.000000" else text
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = []
        for key in sorted(value, key=str):
            items.append(json.dumps(str(key)) + ": " + _encode(value[key], f"{where}.{key}", indent, level + 1))
        return "{" + pad + ("," + pad).join(items) + end + "}"
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        items = [_encode(v, f"{where}[{i}]", indent, level + 1) for i, v in enumerate(value)]
        return "[" + pad + ("," + pad).join(items) + end + "]"
    raise TypeError(f"cannot serialize {type(value).__name__} at {where}")


def dumps_metrics(report: dict, indent: int = 2) -> str:
    return _encode(report, "", indent, 0) + "\n"


def emit_metrics(report: dict, path: str | Path) -> None:
    text = dumps_metrics(report)  # serialize first so a bad report never leaves a partial file
    Path(path).write_text(text)


def summarize(values) -> dict:
    """Count, mean and order statistics of a latency sample (zeros when empty)."""
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        return {"count": 0, "mean": 0.0, "p50": 0.0, "p95": 0.0, "max": 0.0, "min": 0.0}
    return {
        "count": int(arr.size),
        "mean": float(arr.mean()),
        "p50": float(np.percentile(arr, 50)),
        "p95": float(np.percentile(arr, 95)),
        "max": float(arr.max()),
        "min": float(arr.min()),
    }
