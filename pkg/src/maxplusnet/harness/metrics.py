"""Metrics tables (CSV) and run summaries (JSON), written deterministically.

Floats are written with ``repr`` so values round-trip exactly; per-layer
quantities are joined with ``;`` so the column set stays fixed whatever the
depth of the stack. Files are UTF-8 with LF line endings.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field, fields

METRICS_COLUMNS = (
    "run",
    "step",
    "sample",
    "loss",
    "loss_after",
    "data_loss",
    "gains",
    "vu",
    "steps",
    "dead_weights",
    "param_violations",
    "message_violations",
    "propagation_violations",
)


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ";".join(fmt(v) for v in value)
    return str(value)


@dataclass
class MetricsRow:
    """One training step on one sample (``sample = -1`` for a mini-batch step)."""

    run: str
    step: int
    sample: int
    loss: float
    loss_after: float
    data_loss: float | None = None
    gains: list = field(default_factory=list)
    vu: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    dead_weights: int | None = None
    param_violations: int = 0
    message_violations: int = 0
    propagation_violations: int = 0

    def cells(self) -> list[str]:
        return [fmt(getattr(self, f.name)) for f in fields(self)]


assert tuple(f.name for f in fields(MetricsRow)) == METRICS_COLUMNS


@dataclass
class Table:
    header: tuple
    rows: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for row in self.rows:
            w.writerow(row.cells() if isinstance(row, MetricsRow) else [fmt(v) for v in row])
        return buf.getvalue()


def metrics_table(rows: list[MetricsRow]) -> Table:
    return Table(METRICS_COLUMNS, rows)


def _clean(obj):
    if isinstance(obj, float):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if math.isnan(obj):
            return "nan"
        return obj
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        return _clean(obj.item())
    return obj


def summary_json(summary: dict) -> str:
    return json.dumps(_clean(summary), indent=2, sort_keys=True) + "\n"


def write_text(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
