"""Absorbing-state noising and the reverse (denoising) sampling loop.

Generation starts from an all-mask generation region appended to the
prompt. Each step runs the model over the step's compute set, predicts
clean tokens for the still-masked positions, finalizes a scheduled number
of them, and reverts the rest to the mask id. Finalized tokens are never
touched again. The cache engine decides how much of the sequence is
recomputed versus served from cache.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import analysis
from .cache_engine import (
    CacheEngine,
    CacheVariant,
    VariantKind,
    scatter_outputs,
)
from .model_core import ConfigError, ModelWeights, forward_partial
from .trace import StepAudit, StepRecord, StepTrace

__all__ = [
    "Remasking",
    "NoiseSchedule",
    "SamplerConfig",
    "GenerationState",
    "GenerationError",
    "StepSchedule",
    "alpha_bar",
    "corrupt",
    "tokens_per_step_schedule",
    "predict_x0",
    "select_to_unmask",
    "decode_step",
    "generate",
]


class Remasking(str, Enum):
    RANDOM = "random"
    LOW_CONFIDENCE = "low_confidence"
    TOP_MARGIN = "top_margin"


def alpha_bar(t: int, total_steps: int) -> float:
    """Survival probability of a clean token through step t (linear: 1 - t/T)."""
    if not 0 <= t <= total_steps:
        raise ValueError(f"step {t} outside [0, {total_steps}]")
    return 1.0 - t / total_steps


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear masking schedule over ``total_steps`` discrete steps."""

    total_steps: int

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    def alpha_bar(self, t: int) -> float:
        return alpha_bar(t, self.total_steps)

    def beta(self, t: int) -> float:
        """Per-step masking probability, from alpha_bar(t) = prod(1 - beta_i)."""
        if not 1 <= t <= self.total_steps:
            raise ValueError(f"step {t} outside [1, {self.total_steps}]")
        prev = self.alpha_bar(t - 1)
        return 1.0 - self.alpha_bar(t) / prev

    def continuous_time(self, t: int) -> float:
        if not 0 <= t <= self.total_steps:
            raise ValueError(f"step {t} outside [0, {self.total_steps}]")
        return t / self.total_steps


def corrupt(
    x0,
    t: int,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    mask_token_id: int,
) -> np.ndarray:
    """Forward noising: mask each token independently with prob 1 - alpha_bar(t).

    The mask id is absorbing: already-masked entries stay masked.
    """
    x0 = np.asarray(x0, dtype=np.int64)
    p_mask = 1.0 - schedule.alpha_bar(t)
    draw = rng.random(x0.shape[0])
    return np.where(draw < p_mask, mask_token_id, x0)


@dataclass(frozen=True)
class StepSchedule:
    """Per-step decode counts plus the block each step works in.

    Blocks partition the generation region into contiguous spans decoded
    left to right; ``blocks`` holds (start, end) offsets within the
    generation region.
    """

    counts: tuple[int, ...]
    block_of: tuple[int, ...]
    blocks: tuple[tuple[int, int], ...]


def _largest_remainder(
    total: int,
    quotas: Sequence[float],
    highs: Sequence[int],
) -> list[int]:
    """Integer split of ``total`` by quota with 1 <= value <= high per slot.

    Starts from clamped floors, then moves units toward the largest
    fractional shortfall (ties to the lowest index). Feasible whenever
    len(quotas) <= total <= sum(highs).
    """
    vals = [min(h, max(1, int(math.floor(q)))) for q, h in zip(quotas, highs)]
    while sum(vals) < total:
        i = max((i for i in range(len(vals)) if vals[i] < highs[i]),
                key=lambda i: (quotas[i] - vals[i], -i))
        vals[i] += 1
    while sum(vals) > total:
        i = max((i for i in range(len(vals)) if vals[i] > 1),
                key=lambda i: (vals[i] - quotas[i], -i))
        vals[i] -= 1
    return vals


def tokens_per_step_schedule(gen_len: int, steps: int, block_size: int) -> StepSchedule:
    """Distribute ``gen_len`` decodes over ``steps`` across contiguous blocks.

    Steps are split among blocks proportionally to block size, then each
    block's tokens are split over its steps, both by largest remainder
    (remainder to the earliest steps). Every block gets at least one step
    and every step decodes at least one token whenever steps <= gen_len.
    """
    if block_size < 1 or block_size > gen_len:
        raise ValueError(
            f"block_size must be in [1, gen_len], got {block_size}")
    if steps < 1 or steps > gen_len:
        raise ValueError(
            f"steps must be in [1, gen_len] so every step finalizes a "
            f"token, got {steps}")
    blocks = [(start, min(start + block_size, gen_len))
              for start in range(0, gen_len, block_size)]
    sizes = [end - start for start, end in blocks]
    if steps < len(blocks):
        raise ValueError(
            f"infeasible schedule: {len(blocks)} blocks but only {steps} "
            "steps (some block would get 0 steps)")
    steps_per_block = _largest_remainder(
        steps, [steps * size / gen_len for size in sizes], sizes)
    counts: list[int] = []
    block_of: list[int] = []
    for b, (size, n_steps) in enumerate(zip(sizes, steps_per_block)):
        base, rem = divmod(size, n_steps)
        for i in range(n_steps):
            counts.append(base + 1 if i < rem else base)
            block_of.append(b)
    return StepSchedule(counts=tuple(counts), block_of=tuple(block_of),
                        blocks=tuple(blocks))


def _softmax(rows: np.ndarray) -> np.ndarray:
    shifted = rows - rows.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def predict_x0(
    logits: np.ndarray,
    temperature: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Predict clean tokens for masked rows.

    Temperature 0 takes the argmax (ties to the lowest id); otherwise a
    categorical sample from softmax(logits / temperature). Confidence is
    the post-softmax probability of the chosen id and margin the gap
    between the top-2 probabilities, both at the sampling temperature.
    """
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if logits.shape[1] < 2:
        raise ValueError("need at least two vocabulary entries")
    if temperature == 0:
        probs = _softmax(logits)
        ids = np.argmax(probs, axis=1)
    else:
        probs = _softmax(logits / temperature)
        cdf = np.cumsum(probs, axis=1)
        cdf /= cdf[:, -1:]
        draws = rng.random(logits.shape[0])
        ids = np.minimum((cdf < draws[:, None]).sum(axis=1),
                         logits.shape[1] - 1)
    confidence = probs[np.arange(probs.shape[0]), ids]
    top2 = np.partition(probs, probs.shape[1] - 2, axis=1)[:, -2:]
    margin = top2[:, 1] - top2[:, 0]
    return ids.astype(np.int64), confidence, margin


def select_to_unmask(
    positions: Sequence[int],
    confidence: np.ndarray,
    margin: np.ndarray,
    strategy: Remasking,
    k: int,
    active_block: tuple[int, int],
    rng: np.random.Generator,
) -> tuple[int, ...]:
    """Pick the k positions to finalize this step; the rest stay masked.

    Candidates are restricted to the active block. Score ties break
    toward the lowest position index so reruns are deterministic.
    """
    positions = np.asarray(positions, dtype=np.int64)
    lo, hi = active_block
    in_block = (positions >= lo) & (positions < hi)
    pool = positions[in_block]
    if k > pool.shape[0]:
        raise ValueError(
            f"cannot finalize {k} tokens: only {pool.shape[0]} masked "
            "positions in the active block")
    if strategy is Remasking.RANDOM:
        chosen = rng.choice(pool, size=k, replace=False)
        return tuple(sorted(int(p) for p in chosen))
    scores = confidence if strategy is Remasking.LOW_CONFIDENCE else margin
    scores = np.asarray(scores)[in_block]
    order = np.lexsort((pool, -scores))
    return tuple(sorted(int(p) for p in pool[order[:k]]))


@dataclass(frozen=True)
class SamplerConfig:
    gen_len: int
    steps: int
    block_size: int
    remasking: Remasking = Remasking.LOW_CONFIDENCE
    temperature: float = 0.0
    sample_seed: int = 0
    cache: CacheVariant = CacheVariant.none()
    snapshot_layer: int | None = None

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.gen_len < 1:
            raise ConfigError("gen_len must be >= 1")
        if not 1 <= self.steps <= self.gen_len:
            raise ConfigError(
                f"steps ({self.steps}) must be in [1, gen_len] so every "
                "step finalizes at least one token")
        if not 1 <= self.block_size <= self.gen_len:
            raise ConfigError(
                f"block_size ({self.block_size}) must be in [1, gen_len]")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if (self.cache.kind is VariantKind.GREEDY
                and self.remasking is not Remasking.RANDOM):
            raise ConfigError(
                "greedy caching needs a predefined decode order, which only "
                "random remasking provides")


@dataclass
class GenerationState:
    """Mutable state of one generation; single-owner, stepped sequentially."""

    tokens: np.ndarray
    prompt_len: int
    masked: set[int]
    prev_masked: set[int]
    prev_decoded: tuple[int, ...]
    step: int
    rng: np.random.Generator


class GenerationError(RuntimeError):
    """Generation failed mid-run; carries the partial trace for diagnosis."""

    def __init__(self, message: str, partial_trace: StepTrace):
        super().__init__(message)
        self.partial_trace = partial_trace


def _draw_decode_order(
    sched: StepSchedule,
    prompt_len: int,
    rng: np.random.Generator,
) -> list[tuple[int, ...]]:
    """Predraw the random decode order (uniform within each block)."""
    per_block_steps: dict[int, list[int]] = {}
    for step, b in enumerate(sched.block_of):
        per_block_steps.setdefault(b, []).append(step)
    order: list[tuple[int, ...]] = [() for _ in sched.counts]
    for b, (start, end) in enumerate(sched.blocks):
        perm = rng.permutation(np.arange(prompt_len + start, prompt_len + end))
        offset = 0
        for step in per_block_steps[b]:
            k = sched.counts[step]
            order[step] = tuple(sorted(int(p) for p in perm[offset:offset + k]))
            offset += k
    return order


def _assemble_snapshot(
    seq_len: int,
    width: int,
    cached_slab,
    fresh_slab,
) -> tuple[np.ndarray, np.ndarray]:
    """Scatter cached + fresh rows to the natural position order."""
    keys = np.zeros((seq_len, width), dtype=np.float32)
    values = np.zeros((seq_len, width), dtype=np.float32)
    for slab in (cached_slab, fresh_slab):
        if slab is None or slab.n_rows == 0:
            continue
        keys[slab.row_positions] = slab.keys
        values[slab.row_positions] = slab.values
    return keys, values


def decode_step(
    state: GenerationState,
    weights: ModelWeights,
    cfg: SamplerConfig,
    engine: CacheEngine,
    sched: StepSchedule,
    *,
    timed: bool = True,
    kv_audit: bool = False,
) -> StepRecord:
    """Run one denoising step, mutating ``state`` and returning its record."""
    mcfg = weights.config
    t = state.step
    block_lo, block_hi = sched.blocks[sched.block_of[t]]
    block = (state.prompt_len + block_lo, state.prompt_len + block_hi)
    k = sched.counts[t]
    masked_at_start = len(state.masked)

    start_time = time.perf_counter() if timed else None
    plan = engine.plan_step(
        masked=state.masked,
        prev_masked=state.prev_masked,
        prev_decoded=state.prev_decoded,
        step=t,
    )
    cache = engine.cache_slabs()
    used_slabs = list(cache) if cache is not None else None
    result = forward_partial(state.tokens, plan.compute_set, cache, weights)
    engine.commit(plan, result.fresh_kv)
    logits_at = scatter_outputs(plan, result.logits)

    candidates = [p for p in sorted(state.masked)
                  if block[0] <= p < block[1] and p in logits_at]
    rows = np.stack([logits_at[p] for p in candidates])
    # the absorbing state is not a clean token; never propose it as x0
    rows[:, mcfg.mask_token_id] = -np.inf
    ids, confidence, margin = predict_x0(rows, cfg.temperature, state.rng)
    id_of = {p: int(ids[i]) for i, p in enumerate(candidates)}

    if engine.predefined_order is not None:
        chosen = engine.predefined_order[t]
        if not set(chosen) <= set(candidates):
            raise RuntimeError(
                f"step {t}: predefined decode positions missing from the "
                "compute set")
    else:
        chosen = select_to_unmask(candidates, confidence, margin,
                                  cfg.remasking, k, block, state.rng)
    decoded_ids = tuple(id_of[p] for p in chosen)
    for pos, tok in zip(chosen, decoded_ids):
        state.tokens[pos] = tok
    millis = ((time.perf_counter() - start_time) * 1000.0
              if start_time is not None else None)

    record = StepRecord(
        step=t,
        masked_count=masked_at_start,
        rows_computed=len(plan.compute_set),
        decoded_positions=tuple(chosen),
        decoded_ids=decoded_ids,
        refresh=plan.refresh_flag,
        millis=millis,
        mac_estimate=len(plan.compute_set) * analysis.mac_per_row(
            state.tokens.shape[0], _dims(mcfg)),
        block=block,
        cached_positions=plan.cached_positions,
        compute_set=plan.compute_set,
    )
    if cfg.snapshot_layer is not None:
        layer = cfg.snapshot_layer
        cached_slab = used_slabs[layer] if used_slabs is not None else None
        record.key_snapshot, record.value_snapshot = _assemble_snapshot(
            state.tokens.shape[0], mcfg.d_model, cached_slab,
            result.fresh_kv[layer])
    if kv_audit:
        record.audit = StepAudit(
            step=t,
            fresh=[(s.row_positions.copy(), s.keys.copy(), s.values.copy())
                   for s in result.fresh_kv],
            cached_after=[(s.row_positions.copy(), s.keys.copy(),
                           s.values.copy()) for s in engine.slabs],
        )

    state.prev_masked = set(state.masked)
    state.masked.difference_update(chosen)
    state.prev_decoded = tuple(chosen)
    state.step = t + 1
    return record


def _dims(mcfg) -> dict:
    return {
        "n_layers": mcfg.n_layers,
        "n_heads": mcfg.n_heads,
        "d_model": mcfg.d_model,
        "d_head": mcfg.d_head,
        "d_ff": mcfg.d_ff,
        "vocab_size": mcfg.vocab_size,
    }


def generate(
    prompt_ids,
    cfg: SamplerConfig,
    weights: ModelWeights,
    *,
    timed: bool = True,
    kv_audit: bool = False,
) -> tuple[np.ndarray, StepTrace]:
    """Generate ``cfg.gen_len`` tokens after the prompt.

    Returns the full sequence (prompt + generation) and the step trace.
    On a mid-run failure a GenerationError is raised carrying the partial
    trace. Prompt positions are never masked and never decoded.
    """
    mcfg = weights.config
    prompt = np.asarray(prompt_ids, dtype=np.int64)
    if prompt.ndim != 1:
        raise ConfigError("prompt must be a flat id list")
    if prompt.shape[0] and (prompt.min() < 0 or prompt.max() >= mcfg.vocab_size):
        raise ConfigError("prompt contains ids outside the vocabulary")
    if np.any(prompt == mcfg.mask_token_id):
        raise ConfigError("prompt must not contain the mask token id")
    seq_len = prompt.shape[0] + cfg.gen_len
    if seq_len > mcfg.max_positions:
        raise ConfigError(
            f"prompt + gen_len = {seq_len} exceeds max_positions "
            f"{mcfg.max_positions}")
    if cfg.snapshot_layer is not None and not (
            0 <= cfg.snapshot_layer < mcfg.n_layers):
        raise ConfigError(
            f"snapshot_layer {cfg.snapshot_layer} outside [0, "
            f"{mcfg.n_layers})")

    sched = tokens_per_step_schedule(cfg.gen_len, cfg.steps, cfg.block_size)
    rng = np.random.default_rng(cfg.sample_seed)
    predefined = None
    if cfg.cache.kind is VariantKind.GREEDY:
        predefined = _draw_decode_order(sched, prompt.shape[0], rng)
    engine = CacheEngine(
        cfg.cache,
        seq_len=seq_len,
        n_layers=mcfg.n_layers,
        kv_width=mcfg.d_model,
        prefill=range(prompt.shape[0]),
        predefined_order=predefined,
    )

    tokens = np.full(seq_len, mcfg.mask_token_id, dtype=np.int64)
    tokens[:prompt.shape[0]] = prompt
    state = GenerationState(
        tokens=tokens,
        prompt_len=prompt.shape[0],
        masked=set(range(prompt.shape[0], seq_len)),
        prev_masked=set(range(seq_len)),
        prev_decoded=(),
        step=0,
        rng=rng,
    )
    records: list[StepRecord] = []

    def make_trace() -> StepTrace:
        return StepTrace(
            records=records,
            prompt_len=prompt.shape[0],
            gen_len=cfg.gen_len,
            seq_len=seq_len,
            total_steps=cfg.steps,
            variant=cfg.cache.describe(),
            model_dims=_dims(mcfg),
            mask_token_id=mcfg.mask_token_id,
            snapshot_layer=cfg.snapshot_layer,
            final_tokens=None,
        )

    try:
        for _ in range(cfg.steps):
            records.append(decode_step(state, weights, cfg, engine, sched,
                                       timed=timed, kv_audit=kv_audit))
    except Exception as exc:
        raise GenerationError(f"generation failed at step {state.step}: {exc}",
                              partial_trace=make_trace()) from exc

    if state.masked:
        raise GenerationError(
            f"{len(state.masked)} positions still masked after "
            f"{cfg.steps} steps", partial_trace=make_trace())
    trace = make_trace()
    trace.final_tokens = state.tokens.copy()
    return state.tokens.copy(), trace
