"""Metrics over completed runs: cache ratio, compute counters, throughput,
and the key/value representation-dynamics measurements.

All functions here are pure over finished traces, so independent runs can
be analyzed concurrently.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .trace import RunReport, StepTrace

__all__ = [
    "cache_ratio",
    "mac_per_row",
    "compute_counters",
    "Counters",
    "throughput",
    "build_report",
    "kv_dynamics",
    "DynamicsResult",
    "TokenStat",
    "write_dynamics_csvs",
    "verify_trace_invariants",
]


def cache_ratio(trace: StepTrace) -> float:
    """Mean over steps of the fraction of positions served from cache.

    Per step that is (seq_len - rows_computed) / seq_len; the baseline that
    recomputes everything therefore scores exactly 0.
    """
    if not trace.records:
        raise ValueError("empty trace")
    s = trace.seq_len
    return float(np.mean([(s - rec.rows_computed) / s for rec in trace.records]))


def mac_per_row(seq_len: int, dims: dict) -> int:
    """Multiply-accumulate estimate for one computed row.

    Counts the Q/K/V/O projections, the two feed-forward matmuls, the
    QK^T and AV attention products (against ``seq_len`` key rows), and the
    output head. Norms, rotary rotation and activations are ignored as
    non-dominant.
    """
    d, f = dims["d_model"], dims["d_ff"]
    per_layer = 4 * d * d + 2 * d * f + 2 * seq_len * d
    return dims["n_layers"] * per_layer + d * dims["vocab_size"]


@dataclass
class Counters:
    total_query_rows: int
    total_macs: int
    per_step_max_rows: int


def compute_counters(trace: StepTrace, dims: dict | None = None) -> Counters:
    """Exact query-row and MAC totals from the per-step records."""
    if not trace.records:
        raise ValueError("empty trace")
    dims = dims or trace.model_dims
    rows = [rec.rows_computed for rec in trace.records]
    macs = sum(r * mac_per_row(trace.seq_len, dims) for r in rows)
    return Counters(
        total_query_rows=int(sum(rows)),
        total_macs=int(macs),
        per_step_max_rows=int(max(rows)),
    )


def throughput(trace: StepTrace) -> float | None:
    """Generated tokens per second; None when the run was not timed."""
    total = trace.total_millis()
    if total is None:
        return None
    if total <= 0:
        raise ValueError("zero elapsed time")
    return trace.gen_len / (total / 1000.0)


def build_report(trace: StepTrace, baseline: StepTrace | None = None) -> RunReport:
    counters = compute_counters(trace)
    report = RunReport(
        variant=trace.variant,
        cache_ratio=cache_ratio(trace),
        tokens_per_second=throughput(trace),
        total_query_rows=counters.total_query_rows,
        total_macs=counters.total_macs,
        per_step_max_rows=counters.per_step_max_rows,
        gen_len=trace.gen_len,
        seq_len=trace.seq_len,
        steps=trace.total_steps,
    )
    if baseline is not None:
        base = compute_counters(baseline)
        report.row_reduction_vs_baseline = (
            1.0 - counters.total_query_rows / base.total_query_rows)
        report.mac_reduction_vs_baseline = (
            1.0 - counters.total_macs / base.total_macs)
    return report


@dataclass
class TokenStat:
    position: int
    decode_step: int
    pre_mean: float
    post_mean: float
    max_change_step: int
    top2_max_steps: tuple[int, int]
    top2_min_steps: tuple[int, int]
    reveal_change: float
    median_change: float
    spike: bool


@dataclass
class DynamicsResult:
    """Step-pairwise distance matrices plus per-token change statistics.

    Distances use the full concatenated head vector per row; every matrix
    entry is computed once per unordered pair and mirrored, so the output
    is exactly symmetric. Change step ``j`` labels the transition whose
    altered inputs entered step ``j`` (snapshot ``j-1`` -> ``j``).
    """

    key_euclidean: np.ndarray
    key_cosine: np.ndarray
    value_euclidean: np.ndarray
    value_cosine: np.ndarray
    token_stats: list[TokenStat]
    spike_fraction: float


def _pairwise(snapshots: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    steps = snapshots.shape[0]
    euclid = np.zeros((steps, steps), dtype=np.float64)
    cosine = np.eye(steps, dtype=np.float64)
    norms = np.linalg.norm(snapshots, axis=2)
    for i in range(steps):
        rest = snapshots[i + 1:]
        if rest.shape[0] == 0:
            continue
        diff = rest - snapshots[i]
        dist = np.linalg.norm(diff, axis=2).mean(axis=1)
        euclid[i, i + 1:] = dist
        euclid[i + 1:, i] = dist
        dots = (rest * snapshots[i]).sum(axis=2)
        denom = np.maximum(norms[i + 1:] * norms[i], 1e-12)
        sim = (dots / denom).mean(axis=1)
        cosine[i, i + 1:] = sim
        cosine[i + 1:, i] = sim
    return euclid, cosine


def kv_dynamics(
    keys: np.ndarray,
    values: np.ndarray,
    decode_steps: np.ndarray,
) -> DynamicsResult:
    """Measure how key/value rows move across denoising steps.

    ``keys``/``values`` are [steps, seq, width] snapshots on the fixed
    natural position order; ``decode_steps[p]`` is the step at which
    position ``p`` was revealed (-1 for prompt positions). Emits pairwise
    step distance matrices, per-token pre/post-reveal change means, and
    the fraction of tokens whose change at the reveal transition exceeds
    their own median step change.
    """
    if keys.ndim != 3 or keys.shape != values.shape:
        raise ValueError("snapshots missing or malformed")
    steps = keys.shape[0]
    if steps < 2:
        raise ValueError("need at least two snapshots for dynamics")
    key_eu, key_cos = _pairwise(keys)
    val_eu, val_cos = _pairwise(values)

    changes = np.linalg.norm(keys[1:] - keys[:-1], axis=2)  # [steps-1, seq]
    stats: list[TokenStat] = []
    spikes = []
    for pos in range(keys.shape[1]):
        reveal = int(decode_steps[pos])
        if reveal < 0:
            continue
        series = changes[:, pos]
        order = np.argsort(series, kind="stable")
        top_max = (int(order[-1]) + 1, int(order[-2]) + 1)
        top_min = (int(order[0]) + 1, int(order[1]) + 1)
        pre = float(series[:reveal].mean()) if reveal > 0 else float("nan")
        post = (float(series[reveal + 1:].mean())
                if reveal + 1 < series.shape[0] else float("nan"))
        if reveal < series.shape[0]:
            reveal_change = float(series[reveal])
            median = float(np.median(series))
            spike = reveal_change > median
            spikes.append(spike)
        else:
            # revealed at the final step: no later snapshot to observe
            reveal_change = float("nan")
            median = float(np.median(series))
            spike = False
        stats.append(TokenStat(
            position=pos,
            decode_step=reveal,
            pre_mean=pre,
            post_mean=post,
            max_change_step=int(order[-1]) + 1,
            top2_max_steps=top_max,
            top2_min_steps=top_min,
            reveal_change=reveal_change,
            median_change=median,
            spike=spike,
        ))
    fraction = float(np.mean(spikes)) if spikes else 0.0
    return DynamicsResult(
        key_euclidean=key_eu,
        key_cosine=key_cos,
        value_euclidean=val_eu,
        value_cosine=val_cos,
        token_stats=stats,
        spike_fraction=fraction,
    )


def _write_matrix(path: Path, matrix: np.ndarray) -> None:
    steps = matrix.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step"] + [str(i) for i in range(steps)])
        for i in range(steps):
            writer.writerow([str(i)] + [repr(float(x)) for x in matrix[i]])


def write_dynamics_csvs(result: DynamicsResult, out_dir) -> list[Path]:
    """Write the matrices and per-token stats; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, matrix in [
        ("dynamics_key_euclidean.csv", result.key_euclidean),
        ("dynamics_key_cosine.csv", result.key_cosine),
        ("dynamics_value_euclidean.csv", result.value_euclidean),
        ("dynamics_value_cosine.csv", result.value_cosine),
    ]:
        path = out_dir / name
        _write_matrix(path, matrix)
        written.append(path)
    stats_path = out_dir / "dynamics_token_stats.csv"
    with open(stats_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["token_position", "decode_step", "pre_mean",
                         "post_mean", "max_change_step"])
        for s in result.token_stats:
            writer.writerow([s.position, s.decode_step, repr(s.pre_mean),
                             repr(s.post_mean), s.max_change_step])
    written.append(stats_path)
    extremes_path = out_dir / "dynamics_token_extremes.csv"
    with open(extremes_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["token_position", "decode_step",
                         "top2_max_steps", "top2_min_steps",
                         "reveal_change", "median_change", "spike"])
        for s in result.token_stats:
            writer.writerow([
                s.position, s.decode_step,
                ";".join(str(x) for x in s.top2_max_steps),
                ";".join(str(x) for x in s.top2_min_steps),
                repr(s.reveal_change), repr(s.median_change), int(s.spike),
            ])
    written.append(extremes_path)
    return written


def verify_trace_invariants(trace: StepTrace) -> None:
    """Assert the sampler invariants over a full trace.

    Checks monotone unmasking, per-step decode counts, block containment,
    finalized-token immutability against the final sequence, and that no
    mask tokens remain in the generation region. Raises ValueError naming
    the violated invariant.
    """
    decoded_total = 0
    seen: set[int] = set()
    prev_masked_count = trace.gen_len
    for rec in trace.records:
        if rec.masked_count != prev_masked_count:
            raise ValueError(
                f"monotone unmasking violated at step {rec.step}: expected "
                f"{prev_masked_count} masked, recorded {rec.masked_count}")
        k = len(rec.decoded_positions)
        if k == 0:
            raise ValueError(f"no tokens finalized at step {rec.step}")
        if seen & set(rec.decoded_positions):
            raise ValueError(
                f"finalized-token immutability violated: step {rec.step} "
                "re-decoded a position")
        lo, hi = rec.block
        for pos in rec.decoded_positions:
            if not lo <= pos < hi:
                raise ValueError(
                    f"block containment violated at step {rec.step}: "
                    f"position {pos} outside block [{lo}, {hi})")
        seen.update(rec.decoded_positions)
        decoded_total += k
        prev_masked_count -= k
    if decoded_total != trace.gen_len:
        raise ValueError(
            f"decoded {decoded_total} tokens, expected {trace.gen_len}")
    if trace.final_tokens is not None:
        final = np.asarray(trace.final_tokens)
        gen = final[trace.prompt_len:]
        if np.any(gen == trace.mask_token_id):
            raise ValueError("residual mask tokens in the generation region")
        for pos, tok in trace.decoded_id_of().items():
            if int(final[pos]) != tok:
                raise ValueError(
                    f"finalized-token immutability violated: position {pos} "
                    f"ended as {int(final[pos])}, decoded as {tok}")
