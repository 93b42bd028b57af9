"""Trace/result file loading and schema validation."""

from __future__ import annotations

import json
from dataclasses import dataclass

import pandas as pd

EXPECTED_COLUMNS = (
    "step", "arc_id", "xi", "W", "W_orig", "P", "dist_xi", "dist_p", "F", "V",
)


class SchemaError(Exception):
    """The trace file does not carry the expected columns or steps."""


class NetworkMismatch(Exception):
    """Two results reference different networks."""


@dataclass
class TraceFrame:
    """Validated trace table: one row per (step, CoDAG arc)."""

    frame: pd.DataFrame

    @classmethod
    def read_csv(cls, path) -> "TraceFrame":
        frame = pd.read_csv(path, float_precision="round_trip")
        missing = [c for c in EXPECTED_COLUMNS if c not in frame.columns]
        if missing or tuple(frame.columns) != EXPECTED_COLUMNS:
            raise SchemaError(
                f"unexpected trace columns {tuple(frame.columns)}; "
                f"missing {missing or 'none'}, expected exactly {EXPECTED_COLUMNS}"
            )
        steps = sorted(frame["step"].unique())
        if steps != list(range(len(steps))) or (steps and steps[0] != 0):
            raise SchemaError(f"steps must be contiguous from 0, got {steps[:10]}...")
        return cls(frame=frame)

    @property
    def arc_ids(self) -> list[str]:
        first = self.frame[self.frame["step"] == 0]
        return list(first["arc_id"])

    @property
    def n_steps(self) -> int:
        return int(self.frame["step"].max())

    def arc_series(self, arc_id: str, column: str) -> pd.Series:
        rows = self.frame[self.frame["arc_id"] == arc_id].sort_values("step")
        return rows[column].reset_index(drop=True)


def load_result(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def same_network(a: dict, b: dict) -> bool:
    return a.get("network") == b.get("network")
