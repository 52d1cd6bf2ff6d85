"""Run traces: per-step counters, optional snapshots, and file exports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["StepAudit", "StepRecord", "StepTrace", "RunReport"]


@dataclass
class StepAudit:
    """Raw per-layer rows captured for byte-level cache audits.

    ``fresh`` holds (positions, keys, values) produced this step per layer;
    ``cached_after`` holds the cache contents right after the commit.
    """

    step: int
    fresh: list[tuple[np.ndarray, np.ndarray, np.ndarray]]
    cached_after: list[tuple[np.ndarray, np.ndarray, np.ndarray]]


@dataclass
class StepRecord:
    step: int
    masked_count: int
    rows_computed: int
    decoded_positions: tuple[int, ...]
    decoded_ids: tuple[int, ...]
    refresh: bool
    millis: float | None
    mac_estimate: int
    block: tuple[int, int]
    cached_positions: tuple[int, ...]
    compute_set: tuple[int, ...]
    key_snapshot: np.ndarray | None = None
    value_snapshot: np.ndarray | None = None
    audit: StepAudit | None = None

    def to_json_obj(self) -> dict:
        return {
            "step": self.step,
            "masked": self.masked_count,
            "decoded_positions": list(self.decoded_positions),
            "rows_computed": self.rows_computed,
            "millis": self.millis,
            "refresh": self.refresh,
        }


@dataclass
class StepTrace:
    """Everything recorded about one generation run."""

    records: list[StepRecord]
    prompt_len: int
    gen_len: int
    seq_len: int
    total_steps: int
    variant: str
    model_dims: dict
    mask_token_id: int
    snapshot_layer: int | None = None
    final_tokens: np.ndarray | None = None

    @property
    def total_rows(self) -> int:
        return sum(rec.rows_computed for rec in self.records)

    @property
    def total_macs(self) -> int:
        return sum(rec.mac_estimate for rec in self.records)

    def total_millis(self) -> float | None:
        if any(rec.millis is None for rec in self.records):
            return None
        return float(sum(rec.millis for rec in self.records))

    def decode_step_of(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for rec in self.records:
            for pos in rec.decoded_positions:
                out[int(pos)] = rec.step
        return out

    def decoded_id_of(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for rec in self.records:
            for pos, tok in zip(rec.decoded_positions, rec.decoded_ids):
                out[int(pos)] = int(tok)
        return out

    def has_snapshots(self) -> bool:
        return self.snapshot_layer is not None and all(
            rec.key_snapshot is not None for rec in self.records)

    def snapshot_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked [steps, seq, width] key/value snapshots plus the
        per-position decode step (-1 for prompt positions)."""
        if not self.has_snapshots():
            raise ValueError("trace has no snapshots; set snapshot_layer")
        keys = np.stack([rec.key_snapshot for rec in self.records])
        values = np.stack([rec.value_snapshot for rec in self.records])
        decode_steps = np.full(self.seq_len, -1, dtype=np.int64)
        for pos, step in self.decode_step_of().items():
            decode_steps[pos] = step
        return keys, values, decode_steps

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec.to_json_obj()) + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "masked", "rows_computed", "decoded",
                             "refresh", "millis"])
            for rec in self.records:
                writer.writerow([
                    rec.step, rec.masked_count, rec.rows_computed,
                    len(rec.decoded_positions), int(rec.refresh),
                    "" if rec.millis is None else f"{rec.millis:.3f}",
                ])


@dataclass
class RunReport:
    """Flat summary of one run, suitable for JSON export."""

    variant: str
    cache_ratio: float
    tokens_per_second: float | None
    total_query_rows: int
    total_macs: int
    per_step_max_rows: int
    gen_len: int
    seq_len: int
    steps: int
    row_reduction_vs_baseline: float | None = None
    mac_reduction_vs_baseline: float | None = None

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "cache_ratio": self.cache_ratio,
            "tokens_per_second": self.tokens_per_second,
            "total_query_rows": self.total_query_rows,
            "total_macs": self.total_macs,
            "per_step_max_rows": self.per_step_max_rows,
            "gen_len": self.gen_len,
            "seq_len": self.seq_len,
            "steps": self.steps,
            "row_reduction_vs_baseline": self.row_reduction_vs_baseline,
            "mac_reduction_vs_baseline": self.mac_reduction_vs_baseline,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
