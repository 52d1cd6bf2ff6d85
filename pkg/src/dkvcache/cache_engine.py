"""Cache planning and maintenance for the denoising loop.

A masked-denoising sampler cannot reuse key/value rows the way a
left-to-right decoder does: attention is bidirectional and the decode
order is not sequential. The workaround implemented here is *delayed*
caching: a position becomes cacheable only after its token id has been
revealed, and its rows are taken from the forward pass one step after the
reveal, when the fresh computation has already seen the revealed id.

Per layer the cache stores rows left-contiguous in storage layout order;
fresh rows for the step's compute set are appended on the right. The
position ids travel with the rows, so the rotary rotation stays keyed to
original positions and attention is layout-agnostic. Updating the cache
for the next step is a single row gather through a reorder index that is
computed once per step and shared across layers.

Variants
--------
none     recompute everything every step (baseline).
decode   compute set = previous step's masked set (one-step delay);
         optional full refresh every ``refresh_interval`` steps.
greedy   compute set = current decodes + previous decodes + a local
         window around the previous decodes; everything else, including
         still-masked positions, is served stale from cache. Per-step
         compute is independent of sequence length. Needs a predefined
         (random-order) decode schedule.
prefill  cache prompt rows permanently; recompute all generated positions.
pd       decode-style delayed caching plus a permanent prefill cache;
         refresh recomputes decoded rows but never prompt rows.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model_core import KVSlab

__all__ = [
    "LayoutError",
    "VariantKind",
    "WindowCenter",
    "ShiftMode",
    "CacheVariant",
    "ComputePlan",
    "CacheEngine",
    "plan_compute_set",
    "greedy_window",
    "build_layout",
    "concat_reorder",
    "shift_rows",
    "cache_entry_step",
    "scatter_outputs",
    "write_cache_debug",
]


class LayoutError(ValueError):
    """Cache layout bookkeeping is inconsistent."""


class VariantKind(str, Enum):
    NONE = "none"
    DECODE = "decode"
    GREEDY = "greedy"
    PREFILL = "prefill"
    PD = "pd"


class WindowCenter(str, Enum):
    PREVIOUS = "previous"
    CURRENT = "current"


class ShiftMode(str, Enum):
    """Which row to cache for a decoded token on shifted-output models."""

    UN_SHIFT = "un_shift"
    RIGHT_SHIFT = "right_shift"
    UN_AND_RIGHT_SHIFT = "un_and_right_shift"


@dataclass(frozen=True)
class CacheVariant:
    kind: VariantKind
    refresh_interval: int | None = None  # None: never refresh
    window_size: int = 0
    window_center: WindowCenter = WindowCenter.PREVIOUS
    shift_mode: ShiftMode = ShiftMode.UN_SHIFT

    def __post_init__(self) -> None:
        if self.refresh_interval is not None and self.refresh_interval < 1:
            raise ValueError(
                f"refresh_interval must be >= 1, got {self.refresh_interval}")
        if self.window_size < 0:
            raise ValueError(f"window_size must be >= 0, got {self.window_size}")
        if (self.shift_mode is ShiftMode.UN_AND_RIGHT_SHIFT
                and self.kind is not VariantKind.NONE):
            # The combined shift condition cannot be expressed as a single
            # per-step row gather, so it only exists on the naive path.
            raise ValueError(
                "un_and_right_shift is incompatible with the reordering cache "
                "path; it is available only as a naive-path analysis mode")

    @classmethod
    def none(cls) -> "CacheVariant":
        return cls(kind=VariantKind.NONE)

    @classmethod
    def decode(cls, refresh_interval: int | None = None) -> "CacheVariant":
        return cls(kind=VariantKind.DECODE, refresh_interval=refresh_interval)

    @classmethod
    def greedy(
        cls,
        refresh_interval: int | None = None,
        window_size: int = 4,
        window_center: WindowCenter = WindowCenter.PREVIOUS,
    ) -> "CacheVariant":
        return cls(kind=VariantKind.GREEDY, refresh_interval=refresh_interval,
                   window_size=window_size, window_center=window_center)

    @classmethod
    def prefill(cls) -> "CacheVariant":
        return cls(kind=VariantKind.PREFILL)

    @classmethod
    def pd(cls, refresh_interval: int | None = None) -> "CacheVariant":
        return cls(kind=VariantKind.PD, refresh_interval=refresh_interval)

    @classmethod
    def parse(cls, text: str) -> "CacheVariant":
        """Parse ``none``, ``decode[:N]``, ``greedy[:N[:w[:center]]]``,
        ``prefill`` or ``pd[:N]``; ``N`` may be ``inf``."""
        parts = text.strip().lower().split(":")
        kind = parts[0]

        def interval(token: str | None) -> int | None:
            if token is None or token == "inf":
                return None
            return int(token)

        if kind == "none":
            return cls.none()
        if kind == "decode":
            return cls.decode(interval(parts[1] if len(parts) > 1 else None))
        if kind == "greedy":
            return cls.greedy(
                refresh_interval=interval(parts[1] if len(parts) > 1 else None),
                window_size=int(parts[2]) if len(parts) > 2 else 4,
                window_center=WindowCenter(parts[3]) if len(parts) > 3
                else WindowCenter.PREVIOUS,
            )
        if kind == "prefill":
            return cls.prefill()
        if kind == "pd":
            return cls.pd(interval(parts[1] if len(parts) > 1 else None))
        raise ValueError(f"unknown cache variant {text!r}")

    def describe(self) -> str:
        n = "inf" if self.refresh_interval is None else str(self.refresh_interval)
        if self.kind is VariantKind.NONE:
            return "none"
        if self.kind is VariantKind.DECODE:
            return f"decode(N={n})"
        if self.kind is VariantKind.GREEDY:
            return (f"greedy(N={n},w={self.window_size},"
                    f"center={self.window_center.value})")
        if self.kind is VariantKind.PREFILL:
            return "prefill"
        return f"pd(N={n})"


@dataclass
class ComputePlan:
    """One step's layout decision.

    ``layout`` is [cached_positions ; compute_set], a permutation of the
    whole sequence; ``pe_order`` carries the matching original position
    per layout row. ``reorder_index`` selects, from layout rows, the rows
    that form the next step's cache (``next_cached_positions`` order).
    """

    step: int
    compute_set: tuple[int, ...]
    cached_positions: tuple[int, ...]
    layout: tuple[int, ...]
    pe_order: tuple[int, ...]
    reorder_index: np.ndarray
    next_cached_positions: tuple[int, ...]
    refresh_flag: bool

    def validate(self, seq_len: int) -> None:
        if self.layout != self.cached_positions + self.compute_set:
            raise LayoutError("layout soundness violated: layout is not "
                              "[cached ; compute]")
        if sorted(self.layout) != list(range(seq_len)):
            raise LayoutError("layout soundness violated: layout is not a "
                              "permutation of the sequence positions")
        if self.pe_order != self.layout:
            raise LayoutError("layout soundness violated: pe_order does not "
                              "mirror the layout")
        if self.reorder_index.shape[0] != len(self.next_cached_positions):
            raise LayoutError("layout soundness violated: reorder index size "
                              "mismatch")
        if self.reorder_index.size and (
                self.reorder_index.min() < 0
                or self.reorder_index.max() >= len(self.layout)):
            raise LayoutError("layout soundness violated: reorder index out "
                              "of bounds")
        selected = tuple(self.layout[i] for i in self.reorder_index)
        if selected != self.next_cached_positions:
            raise LayoutError("layout soundness violated: reorder index does "
                              "not select the next cached set")


def _sorted_tuple(positions: Iterable[int]) -> tuple[int, ...]:
    return tuple(sorted(int(p) for p in positions))


def greedy_window(
    center_positions: Iterable[int],
    window_size: int,
    region: tuple[int, int],
) -> set[int]:
    """Union of windows [c - ceil(w/2), c + floor(w/2)] clipped to ``region``.

    ``region`` is the half-open generation span; positions outside it do
    not exist for windowing purposes.
    """
    if window_size < 0:
        raise ValueError(f"window_size must be >= 0, got {window_size}")
    lo_off = math.ceil(window_size / 2)
    hi_off = window_size // 2
    start, end = region
    out: set[int] = set()
    for center in center_positions:
        lo = max(start, center - lo_off)
        hi = min(end - 1, center + hi_off)
        out.update(range(lo, hi + 1))
    return out


def plan_compute_set(
    variant: CacheVariant,
    *,
    masked: Iterable[int],
    prev_masked: Iterable[int],
    prev_decoded: Iterable[int],
    prefill: Iterable[int],
    step: int,
    seq_len: int,
    gen_region: tuple[int, int] | None = None,
    predefined_order: Sequence[Sequence[int]] | None = None,
) -> tuple[tuple[int, ...], bool]:
    """Decide which positions are recomputed this step.

    Returns the compute set (ascending) and whether this step discards the
    cache first. Step 0 always computes everything: there is no cache yet,
    and the full pass doubles as the prefill pass.
    """
    masked = frozenset(int(p) for p in masked)
    prev_masked = frozenset(int(p) for p in prev_masked)
    prefill_set = frozenset(int(p) for p in prefill)
    if not masked <= prev_masked:
        raise ValueError("masked set must shrink monotonically: current "
                         "masked set is not contained in the previous one")
    everything = tuple(range(seq_len))
    if variant.kind is VariantKind.NONE:
        return everything, False
    if step == 0:
        return everything, False

    interval = variant.refresh_interval
    refresh = (interval is not None and step % interval == 0
               and variant.kind is not VariantKind.PREFILL)
    if refresh:
        if variant.kind is VariantKind.PD:
            return _sorted_tuple(set(everything) - prefill_set), True
        return everything, True

    if variant.kind in (VariantKind.DECODE, VariantKind.PD):
        return _sorted_tuple(prev_masked), False
    if variant.kind is VariantKind.PREFILL:
        return _sorted_tuple(set(everything) - prefill_set), False

    # greedy
    if predefined_order is None:
        raise ValueError("greedy caching requires a predefined decode order "
                         "(random remasking)")
    if gen_region is None:
        gen_region = (len(prefill_set), seq_len)
    current = set(int(p) for p in predefined_order[step])
    previous = set(int(p) for p in prev_decoded)
    centers = previous if variant.window_center is WindowCenter.PREVIOUS else current
    window = greedy_window(centers, variant.window_size, gen_region)
    return _sorted_tuple(current | previous | window), False


def build_layout(
    compute_set: Sequence[int],
    cached_positions: Sequence[int],
    next_cached_positions: Sequence[int],
    seq_len: int,
    step: int = 0,
    refresh_flag: bool = False,
) -> ComputePlan:
    """Assemble the [cached ; fresh] layout and the next-step reorder index.

    The reorder index is computed once here and shared by every layer's
    gather during the commit.
    """
    compute = tuple(int(p) for p in compute_set)
    cached = tuple(int(p) for p in cached_positions)
    nxt = tuple(int(p) for p in next_cached_positions)
    layout = cached + compute
    index_of = {pos: i for i, pos in enumerate(layout)}
    try:
        reorder = np.array([index_of[p] for p in nxt], dtype=np.int64)
    except KeyError as exc:
        raise LayoutError(
            f"next cached position {exc.args[0]} is absent from the layout")
    plan = ComputePlan(
        step=step,
        compute_set=compute,
        cached_positions=cached,
        layout=layout,
        pe_order=layout,
        reorder_index=reorder,
        next_cached_positions=nxt,
        refresh_flag=refresh_flag,
    )
    plan.validate(seq_len)
    return plan


def concat_reorder(
    cached: KVSlab,
    fresh: KVSlab,
    reorder_index: np.ndarray,
) -> tuple[KVSlab, KVSlab]:
    """Concatenate cached and fresh rows, then gather the next cache.

    Returns (full, next_cached). ``full`` is the layout-order slab used by
    attention; ``next_cached`` holds the rows selected by the reorder
    index. Both operations are pure copies, so cached bytes survive any
    number of steps unchanged.
    """
    if cached.layer != fresh.layer:
        raise LayoutError(
            f"layer mismatch: cached {cached.layer} vs fresh {fresh.layer}")
    keys = np.concatenate([cached.keys, fresh.keys], axis=0)
    values = np.concatenate([cached.values, fresh.values], axis=0)
    positions = np.concatenate([cached.row_positions, fresh.row_positions])
    if reorder_index.size and (
            reorder_index.min() < 0 or reorder_index.max() >= keys.shape[0]):
        raise LayoutError("reorder index out of bounds for concatenated rows")
    full = KVSlab(layer=cached.layer, keys=keys, values=values,
                  row_positions=positions)
    next_cached = KVSlab(
        layer=cached.layer,
        keys=keys[reorder_index],
        values=values[reorder_index],
        row_positions=positions[reorder_index],
    )
    return full, next_cached


def scatter_outputs(plan: ComputePlan, partial_logits: np.ndarray) -> dict[int, np.ndarray]:
    """Map logit rows back to original positions.

    Positions outside the compute set are simply absent from the result;
    they carry no logits this step.
    """
    if partial_logits.shape[0] != len(plan.compute_set):
        raise LayoutError(
            f"row-count mismatch: {partial_logits.shape[0]} logit rows for "
            f"{len(plan.compute_set)} computed positions")
    return {pos: partial_logits[i] for i, pos in enumerate(plan.compute_set)}


def shift_rows(mode: ShiftMode, position: int, seq_len: int) -> int | None:
    """Row whose K/V are stored for a decoded token on shifted-output models.

    Returns None when the token cannot be cached (no row to the right of
    the last position).
    """
    if mode is ShiftMode.UN_SHIFT:
        return position
    if mode is ShiftMode.RIGHT_SHIFT:
        return position + 1 if position + 1 < seq_len else None
    # un_and_right: the stored row is the token's own, but see
    # cache_entry_step for the stricter eligibility condition.
    return position if position + 1 < seq_len else None


def cache_entry_step(
    mode: ShiftMode,
    position: int,
    decode_step_of: Mapping[int, int],
    seq_len: int,
) -> int | None:
    """First step whose commit may add this token's row to the cache.

    All modes keep the one-step delay: a token revealed at step s is
    recomputed fresh at step s+1 and cacheable from that commit on.
    ``un_and_right_shift`` additionally waits until the input feeding the
    row to the right is fixed, i.e. until the right neighbour has been
    revealed as well; like ``right_shift`` it never caches the last
    position. Positions absent from ``decode_step_of`` (prompt rows) count
    as revealed before step 0.
    """
    own = decode_step_of.get(position, -1)
    if mode is ShiftMode.UN_SHIFT:
        return own + 1
    if position + 1 >= seq_len:
        return None
    if mode is ShiftMode.RIGHT_SHIFT:
        return own + 1
    neighbour = decode_step_of.get(position + 1, -1)
    return max(own, neighbour) + 1


class CacheEngine:
    """Stateful per-generation cache: plans a step, then commits fresh rows.

    The engine owns the per-layer slabs and the cached-position list; the
    sampler feeds it the masked-set bookkeeping. One plan is produced per
    step and shared read-only across layers.
    """

    def __init__(
        self,
        variant: CacheVariant,
        *,
        seq_len: int,
        n_layers: int,
        kv_width: int,
        prefill: Iterable[int] = (),
        predefined_order: Sequence[Sequence[int]] | None = None,
    ) -> None:
        if variant.shift_mode is not ShiftMode.UN_SHIFT:
            raise ValueError(
                "shift modes other than un_shift require a shifted-output "
                "(AR-adapted) model; the built-in transformer is not one")
        prefill_tuple = _sorted_tuple(prefill)
        if prefill_tuple and prefill_tuple != tuple(range(len(prefill_tuple))):
            raise ValueError("prefill positions must be the sequence prefix")
        if variant.kind is VariantKind.GREEDY and predefined_order is None:
            raise ValueError("greedy caching requires a predefined decode "
                             "order (random remasking)")
        self.variant = variant
        self.seq_len = seq_len
        self.n_layers = n_layers
        self.kv_width = kv_width
        self.prefill = prefill_tuple
        self.predefined_order = (
            [tuple(int(p) for p in step) for step in predefined_order]
            if predefined_order is not None else None)
        self.cached_positions: tuple[int, ...] = ()
        self.slabs: list[KVSlab] = [KVSlab.empty(i, kv_width)
                                    for i in range(n_layers)]
        self.step = 0

    def cache_slabs(self) -> list[KVSlab] | None:
        """Current per-layer cache, or None when nothing is cached."""
        if not self.cached_positions:
            return None
        return self.slabs

    def refresh(self) -> None:
        """Discard cached rows; under pd the prompt rows are kept.

        Prompt rows sit at the front of the ascending cached order, so
        keeping them is a prefix slice, not a recomputation.
        """
        if self.variant.kind is VariantKind.PD and self.prefill:
            keep = len(self.prefill)
            if self.cached_positions[:keep] != self.prefill:
                raise LayoutError("prefill rows missing from cache at refresh")
            self.cached_positions = self.prefill
            self.slabs = [
                KVSlab(layer=s.layer, keys=s.keys[:keep], values=s.values[:keep],
                       row_positions=s.row_positions[:keep])
                for s in self.slabs
            ]
        else:
            self.cached_positions = ()
            self.slabs = [KVSlab.empty(i, self.kv_width)
                          for i in range(self.n_layers)]

    def _next_cached(self, masked: frozenset[int], step: int) -> tuple[int, ...]:
        kind = self.variant.kind
        if kind is VariantKind.NONE:
            return ()
        if kind in (VariantKind.DECODE, VariantKind.PD):
            return _sorted_tuple(set(range(self.seq_len)) - masked)
        if kind is VariantKind.PREFILL:
            return self.prefill
        # greedy: cache the complement of the next step's compute set, so
        # stale rows for still-masked positions are deliberately retained.
        assert self.predefined_order is not None
        if step + 1 >= len(self.predefined_order):
            return ()
        next_compute, _ = plan_compute_set(
            self.variant,
            masked=masked - set(self.predefined_order[step]),
            prev_masked=masked,
            prev_decoded=self.predefined_order[step],
            prefill=self.prefill,
            step=step + 1,
            seq_len=self.seq_len,
            gen_region=(len(self.prefill), self.seq_len),
            predefined_order=self.predefined_order,
        )
        return _sorted_tuple(set(range(self.seq_len)) - set(next_compute))

    def plan_step(
        self,
        *,
        masked: Iterable[int],
        prev_masked: Iterable[int],
        prev_decoded: Iterable[int],
        step: int,
    ) -> ComputePlan:
        masked_set = frozenset(int(p) for p in masked)
        compute, refresh = plan_compute_set(
            self.variant,
            masked=masked_set,
            prev_masked=prev_masked,
            prev_decoded=prev_decoded,
            prefill=self.prefill,
            step=step,
            seq_len=self.seq_len,
            gen_region=(len(self.prefill), self.seq_len),
            predefined_order=self.predefined_order,
        )
        if refresh:
            self.refresh()
        if set(self.cached_positions) & set(compute):
            raise LayoutError("layout soundness violated: cached positions "
                              "overlap the compute set")
        plan = build_layout(
            compute,
            self.cached_positions,
            self._next_cached(masked_set, step),
            self.seq_len,
            step=step,
            refresh_flag=refresh,
        )
        return plan

    def commit(self, plan: ComputePlan, fresh_kv: Sequence[KVSlab]) -> None:
        """Fold this step's fresh rows into the cache (one gather per layer)."""
        if len(fresh_kv) != self.n_layers:
            raise LayoutError(
                f"expected fresh rows for {self.n_layers} layers, "
                f"got {len(fresh_kv)}")
        new_slabs = []
        for idx in range(self.n_layers):
            fresh = fresh_kv[idx]
            if tuple(int(p) for p in fresh.row_positions) != plan.compute_set:
                raise LayoutError(
                    f"layer {idx}: fresh rows do not match the plan's "
                    "compute set")
            _, next_cached = concat_reorder(self.slabs[idx], fresh,
                                            plan.reorder_index)
            new_slabs.append(next_cached)
        self.slabs = new_slabs
        self.cached_positions = plan.next_cached_positions
        self.step = plan.step + 1


def write_cache_debug(records, path) -> None:
    """Dump per-step cache layout as JSONL (step, cached, compute, refresh)."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({
                "step": rec.step,
                "cached_positions": list(rec.cached_positions),
                "compute_set": list(rec.compute_set),
                "refresh_flag": rec.refresh,
            }) + "\n")
