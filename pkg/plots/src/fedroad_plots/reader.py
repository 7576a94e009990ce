"""metrics.csv reading against the fixed schema.

One csv file is one run: a header row followed by one row per communication
round. Files are opened read-only; nothing here ever writes.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass

EXPECTED_HEADER = [
    "run_id",
    "strategy",
    "round",
    "lr",
    "test_accuracy",
    "test_loss",
    "uplink_bytes",
    "downlink_bytes",
    "cumulative_bytes",
    "wall_ms",
]


class SchemaError(ValueError):
    """The csv does not match the metrics schema; message names the column."""


@dataclass(frozen=True)
class MetricsRow:
    run_id: str
    strategy: str
    round: int
    lr: float
    test_accuracy: float
    test_loss: float
    uplink_bytes: int
    downlink_bytes: int
    cumulative_bytes: int
    wall_ms: float


@dataclass(frozen=True)
class Run:
    path: str
    rows: list[MetricsRow]

    @property
    def run_id(self) -> str:
        return self.rows[0].run_id

    @property
    def strategy(self) -> str:
        return self.rows[0].strategy

    @property
    def label(self) -> str:
        return f"{self.run_id}/{self.strategy}"

    @property
    def final_accuracy(self) -> float:
        return self.rows[-1].test_accuracy

    @property
    def final_cumulative_bytes(self) -> int:
        return self.rows[-1].cumulative_bytes

    def sweep_value(self) -> float:
        """Numeric sweep coordinate parsed from the run id's trailing number
        (convention: ids like 'eps-0.8' or 'cpc-3')."""
        m = re.search(r"(\d+(?:\.\d+)?)\s*$", self.run_id)
        if not m:
            raise SchemaError(
                f"run_id {self.run_id!r} carries no trailing numeric sweep value"
            )
        return float(m.group(1))


def load_run(path) -> Run:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file")
        for got, want in zip(header, EXPECTED_HEADER):
            if got != want:
                raise SchemaError(f"{path}: expected column {want!r}, found {got!r}")
        if len(header) != len(EXPECTED_HEADER):
            raise SchemaError(
                f"{path}: expected {len(EXPECTED_HEADER)} columns, found {len(header)}"
            )
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) != len(EXPECTED_HEADER):
                raise SchemaError(f"{path}:{lineno}: wrong field count")
            try:
                rows.append(
                    MetricsRow(
                        run_id=raw[0],
                        strategy=raw[1],
                        round=int(raw[2]),
                        lr=float(raw[3]),
                        test_accuracy=float(raw[4]),
                        test_loss=float(raw[5]),
                        uplink_bytes=int(raw[6]),
                        downlink_bytes=int(raw[7]),
                        cumulative_bytes=int(raw[8]),
                        wall_ms=float(raw[9]),
                    )
                )
            except ValueError as e:
                raise SchemaError(f"{path}:{lineno}: {e}")
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    return Run(path=str(path), rows=rows)
