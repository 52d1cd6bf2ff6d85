import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dkvcache import (
    CacheEngine,
    CacheVariant,
    KVSlab,
    LayoutError,
    Remasking,
    SamplerConfig,
    ShiftMode,
    VariantKind,
    WindowCenter,
    build_layout,
    cache_entry_step,
    concat_reorder,
    generate,
    greedy_window,
    plan_compute_set,
    scatter_outputs,
    shift_rows,
)
from dkvcache.cache_engine import ComputePlan


def make_slab(layer, positions, width=4, seed=0):
    rng = np.random.default_rng(seed + 100 * layer)
    positions = np.asarray(positions, dtype=np.int64)
    return KVSlab(
        layer=layer,
        keys=rng.random((len(positions), width), dtype=np.float32),
        values=rng.random((len(positions), width), dtype=np.float32),
        row_positions=positions,
    )


class TestCacheVariant:
    @pytest.mark.parametrize("text,expected", [
        ("none", "none"),
        ("decode", "decode(N=inf)"),
        ("decode:8", "decode(N=8)"),
        ("greedy:2:4", "greedy(N=2,w=4,center=previous)"),
        ("greedy:2:4:current", "greedy(N=2,w=4,center=current)"),
        ("prefill", "prefill"),
        ("pd:4", "pd(N=4)"),
    ])
    def test_parse_describe(self, text, expected):
        assert CacheVariant.parse(text).describe() == expected

    def test_parse_rejects_unknown(self):
        with pytest.raises(ValueError, match="unknown cache variant"):
            CacheVariant.parse("decoe:8")

    def test_refresh_interval_bound(self):
        with pytest.raises(ValueError, match="refresh_interval"):
            CacheVariant.decode(0)

    def test_un_and_right_incompatible_with_reorder_path(self):
        with pytest.raises(ValueError, match="un_and_right"):
            CacheVariant(kind=VariantKind.DECODE,
                         shift_mode=ShiftMode.UN_AND_RIGHT_SHIFT)


class TestGreedyWindow:
    def test_center_window(self):
        assert greedy_window([5], 4, (0, 16)) == {3, 4, 5, 6, 7}

    def test_boundary_clip(self):
        assert greedy_window([0], 4, (0, 16)) == {0, 1, 2}

    def test_union_of_centers(self):
        assert greedy_window([5, 6], 2, (0, 16)) == {4, 5, 6, 7}

    def test_zero_window(self):
        assert greedy_window([5], 0, (0, 16)) == {5}

    def test_clip_to_region_start(self):
        assert greedy_window([4], 4, (4, 16)) == {4, 5, 6}


class TestPlanComputeSet:
    def test_decode_step_zero_full(self):
        compute, refresh = plan_compute_set(
            CacheVariant.decode(8), masked={2, 3}, prev_masked={1, 2, 3},
            prev_decoded=(1,), prefill={0}, step=0, seq_len=4)
        assert compute == (0, 1, 2, 3)
        assert not refresh

    def test_decode_refresh_step(self):
        compute, refresh = plan_compute_set(
            CacheVariant.decode(8), masked={2}, prev_masked={2, 3},
            prev_decoded=(3,), prefill={0}, step=8, seq_len=4)
        assert compute == (0, 1, 2, 3)
        assert refresh

    def test_decode_uses_previous_masked(self):
        compute, refresh = plan_compute_set(
            CacheVariant.decode(8), masked={2}, prev_masked={2, 3},
            prev_decoded=(3,), prefill={0}, step=3, seq_len=4)
        assert compute == (2, 3)
        assert not refresh

    def test_greedy_worked_example(self):
        variant = CacheVariant.greedy(window_size=4)
        order = {9: (9,), 8: (4,)}
        predefined = [order.get(i, ()) for i in range(10)]
        compute, refresh = plan_compute_set(
            variant, masked=set(range(16)) - {4}, prev_masked=set(range(16)),
            prev_decoded=(4,), prefill=(), step=9, seq_len=16,
            gen_region=(0, 16), predefined_order=predefined)
        assert compute == (2, 3, 4, 5, 6, 9)
        assert not refresh

    def test_greedy_needs_predefined_order(self):
        with pytest.raises(ValueError, match="predefined"):
            plan_compute_set(
                CacheVariant.greedy(), masked={1}, prev_masked={1, 2},
                prev_decoded=(2,), prefill=(), step=1, seq_len=4)

    def test_prefill_every_step(self):
        compute, refresh = plan_compute_set(
            CacheVariant.prefill(), masked={5}, prev_masked={5, 6},
            prev_decoded=(6,), prefill={0, 1, 2, 3}, step=5, seq_len=8)
        assert compute == (4, 5, 6, 7)
        assert not refresh

    def test_pd_normal_step_is_delayed_caching(self):
        compute, refresh = plan_compute_set(
            CacheVariant.pd(4), masked={5}, prev_masked={5, 6},
            prev_decoded=(6,), prefill={0, 1, 2, 3}, step=5, seq_len=8)
        assert compute == (5, 6)
        assert not refresh

    def test_pd_refresh_never_touches_prefill(self):
        compute, refresh = plan_compute_set(
            CacheVariant.pd(4), masked={5}, prev_masked={5, 6},
            prev_decoded=(6,), prefill={0, 1, 2, 3}, step=8, seq_len=8)
        assert compute == (4, 5, 6, 7)
        assert refresh

    def test_monotone_mask_violation(self):
        with pytest.raises(ValueError, match="monotonic"):
            plan_compute_set(
                CacheVariant.decode(), masked={1, 9}, prev_masked={1},
                prev_decoded=(), prefill=(), step=1, seq_len=10)


class TestBuildLayout:
    def test_worked_eight_token_example(self):
        # cached [2,4,5], masked [0,1,3,6,7]; next cached adds position 7
        plan = build_layout(
            compute_set=[0, 1, 3, 6, 7],
            cached_positions=[2, 4, 5],
            next_cached_positions=[2, 4, 5, 7],
            seq_len=8,
        )
        assert plan.layout == (2, 4, 5, 0, 1, 3, 6, 7)
        assert plan.pe_order == plan.layout
        assert list(plan.reorder_index) == [0, 1, 2, 7]

    def test_empty_cache_degenerate(self):
        plan = build_layout(list(range(6)), [], [0, 3], 6)
        assert plan.layout == (0, 1, 2, 3, 4, 5)
        assert list(plan.reorder_index) == [0, 3]

    def test_missing_next_position(self):
        with pytest.raises(LayoutError, match="absent"):
            build_layout([0, 1], [2], [5], 3)

    def test_corrupted_index_detected(self):
        plan = build_layout([0, 1, 3], [2], [2, 3], 4)
        bad = ComputePlan(
            step=plan.step, compute_set=plan.compute_set,
            cached_positions=plan.cached_positions, layout=plan.layout,
            pe_order=plan.pe_order,
            reorder_index=np.array([0, 1]),  # selects (2, 0), not (2, 3)
            next_cached_positions=plan.next_cached_positions,
            refresh_flag=False)
        with pytest.raises(LayoutError, match="layout soundness"):
            bad.validate(4)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31))
    def test_gather_matches_naive_reference(self, seed):
        rng = np.random.default_rng(seed)
        seq = int(rng.integers(2, 33))
        n_cached = int(rng.integers(0, seq))
        cached_pos = np.sort(rng.choice(seq, size=n_cached, replace=False))
        compute = np.setdiff1d(np.arange(seq), cached_pos)
        next_n = int(rng.integers(0, seq + 1))
        next_pos = np.sort(rng.choice(seq, size=next_n, replace=False))
        plan = build_layout(compute.tolist(), cached_pos.tolist(),
                            next_pos.tolist(), seq)
        cached = make_slab(0, cached_pos, seed=seed)
        fresh = make_slab(0, compute, seed=seed + 1)
        _, nxt = concat_reorder(cached, fresh, plan.reorder_index)
        # naive path: scatter rows to natural order, then gather
        buf_k = np.zeros((seq, 4), dtype=np.float32)
        buf_v = np.zeros((seq, 4), dtype=np.float32)
        for slab in (cached, fresh):
            buf_k[slab.row_positions] = slab.keys
            buf_v[slab.row_positions] = slab.values
        np.testing.assert_array_equal(nxt.keys, buf_k[next_pos])
        np.testing.assert_array_equal(nxt.values, buf_v[next_pos])
        np.testing.assert_array_equal(nxt.row_positions, next_pos)


class TestConcatReorder:
    def test_identity_prefix_keeps_cache(self):
        cached = make_slab(0, [1, 3])
        fresh = make_slab(0, [0, 2], seed=5)
        plan = build_layout([0, 2], [1, 3], [1, 3], 4)
        full, nxt = concat_reorder(cached, fresh, plan.reorder_index)
        np.testing.assert_array_equal(nxt.keys, cached.keys)
        np.testing.assert_array_equal(nxt.values, cached.values)
        assert full.n_rows == 4

    def test_worked_example_positions(self):
        cached = make_slab(0, [2, 4, 5])
        fresh = make_slab(0, [0, 1, 3, 6, 7], seed=9)
        plan = build_layout([0, 1, 3, 6, 7], [2, 4, 5], [2, 4, 5, 7], 8)
        full, nxt = concat_reorder(cached, fresh, plan.reorder_index)
        assert list(full.row_positions) == [2, 4, 5, 0, 1, 3, 6, 7]
        assert list(nxt.row_positions) == [2, 4, 5, 7]
        np.testing.assert_array_equal(nxt.keys[3], fresh.keys[4])

    def test_out_of_bounds_index(self):
        cached = make_slab(0, [0])
        fresh = make_slab(0, [1], seed=2)
        with pytest.raises(LayoutError, match="out of bounds"):
            concat_reorder(cached, fresh, np.array([5]))


class TestScatterOutputs:
    def test_identity(self):
        plan = build_layout([0, 1, 2], [], [], 3)
        rows = np.arange(6, dtype=np.float32).reshape(3, 2)
        out = scatter_outputs(plan, rows)
        assert set(out) == {0, 1, 2}
        np.testing.assert_array_equal(out[1], rows[1])

    def test_order_preserved(self):
        plan = ComputePlan(step=0, compute_set=(3, 1), cached_positions=(0, 2),
                           layout=(0, 2, 3, 1), pe_order=(0, 2, 3, 1),
                           reorder_index=np.zeros(0, dtype=np.int64),
                           next_cached_positions=(), refresh_flag=False)
        rows = np.array([[10.0], [20.0]], dtype=np.float32)
        out = scatter_outputs(plan, rows)
        assert out[3][0] == 10.0 and out[1][0] == 20.0
        assert 0 not in out and 2 not in out  # absent, never zero-filled

    def test_row_count_mismatch(self):
        plan = build_layout([0, 1], [], [], 2)
        with pytest.raises(LayoutError, match="row-count"):
            scatter_outputs(plan, np.zeros((3, 1), dtype=np.float32))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_scatter_gather_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        seq = int(rng.integers(2, 20))
        n_cached = int(rng.integers(0, seq))
        cached = np.sort(rng.choice(seq, size=n_cached, replace=False))
        compute = np.setdiff1d(np.arange(seq), cached)
        rng.shuffle(compute)
        plan = build_layout(compute.tolist(), cached.tolist(), [], seq)
        rows = rng.random((len(compute), 3), dtype=np.float32)
        out = scatter_outputs(plan, rows)
        regathered = np.stack([out[p] for p in compute])
        np.testing.assert_array_equal(regathered, rows)


class TestShiftRows:
    def test_un_shift(self):
        assert shift_rows(ShiftMode.UN_SHIFT, 7, 16) == 7

    def test_right_shift(self):
        assert shift_rows(ShiftMode.RIGHT_SHIFT, 7, 16) == 8

    def test_right_shift_last_position_excluded(self):
        assert shift_rows(ShiftMode.RIGHT_SHIFT, 15, 16) is None

    def test_un_and_right_trace_audit(self):
        # left-to-right decode order: the combined condition caches every
        # token strictly later than plain un-shift does
        seq_len = 10
        decode_step_of = {p: p for p in range(seq_len)}
        for pos in range(seq_len):
            plain = cache_entry_step(ShiftMode.UN_SHIFT, pos, decode_step_of,
                                     seq_len)
            strict = cache_entry_step(ShiftMode.UN_AND_RIGHT_SHIFT, pos,
                                      decode_step_of, seq_len)
            if strict is None:
                assert pos == seq_len - 1
            else:
                assert strict > plain

    def test_un_and_right_waits_for_neighbour(self):
        decode_step_of = {4: 9, 5: 2}
        assert cache_entry_step(ShiftMode.UN_AND_RIGHT_SHIFT, 4,
                                decode_step_of, 8) == 10
        decode_step_of = {4: 2, 5: 9}
        assert cache_entry_step(ShiftMode.UN_AND_RIGHT_SHIFT, 4,
                                decode_step_of, 8) == 10

    def test_engine_rejects_shifted_modes(self):
        variant = CacheVariant(kind=VariantKind.DECODE,
                               shift_mode=ShiftMode.RIGHT_SHIFT)
        with pytest.raises(ValueError, match="shifted-output"):
            CacheEngine(variant, seq_len=8, n_layers=1, kv_width=4)


class TestRefreshSemantics:
    def run_plans(self, variant, steps, seq_len=8, prefill=()):
        engine = CacheEngine(variant, seq_len=seq_len, n_layers=1, kv_width=4,
                             prefill=prefill)
        masked = set(range(len(prefill), seq_len))
        prev_masked = set(range(seq_len))
        prev_decoded = ()
        flags, computes = [], []
        for step in range(steps):
            plan = engine.plan_step(masked=masked, prev_masked=prev_masked,
                                    prev_decoded=prev_decoded, step=step)
            flags.append(plan.refresh_flag)
            computes.append(plan.compute_set)
            fresh = [make_slab(0, np.asarray(plan.compute_set), seed=step)]
            engine.commit(plan, fresh)
            decode = sorted(masked)[0]
            prev_masked = set(masked)
            masked = masked - {decode}
            prev_decoded = (decode,)
        return flags, computes

    def test_refresh_interval_one_is_baseline(self):
        flags, computes = self.run_plans(CacheVariant.decode(1), 6)
        assert all(c == tuple(range(8)) for c in computes)
        assert flags == [False, True, True, True, True, True]

    def test_refresh_never_fires_when_disabled(self):
        flags, _ = self.run_plans(CacheVariant.decode(None), 6)
        assert not any(flags)

    def test_greedy_refresh_cadence(self):
        predefined = [(i + 2,) for i in range(6)]
        engine = CacheEngine(CacheVariant.greedy(2, 4), seq_len=8, n_layers=1,
                             kv_width=4, predefined_order=predefined)
        masked = set(range(2, 8))
        prev_masked = set(range(8))
        prev_decoded = ()
        flags = []
        for step in range(6):
            plan = engine.plan_step(masked=masked, prev_masked=prev_masked,
                                    prev_decoded=prev_decoded, step=step)
            flags.append(plan.refresh_flag)
            engine.commit(plan, [make_slab(0, np.asarray(plan.compute_set),
                                           seed=step)])
            decode = predefined[step][0]
            prev_masked = set(masked)
            masked = masked - {decode}
            prev_decoded = (decode,)
        assert flags == [False, False, True, False, True, False]


class TestEngineRuns:
    def test_delay_correctness_decode(self, tiny_weights):
        cfg = SamplerConfig(gen_len=16, steps=8, block_size=16, sample_seed=5,
                            cache=CacheVariant.decode(None))
        _, trace = generate(np.arange(1, 7), cfg, tiny_weights, timed=False,
                            kv_audit=True)
        decode_step_of = trace.decode_step_of()
        # a position decoded at step t is recomputed at t+1 and its cached
        # rows from then on byte-equal the fresh rows of step t+1
        last_fresh = {}
        for rec in trace.records:
            audit = rec.audit
            for layer, (positions, keys, values) in enumerate(audit.fresh):
                for row, pos in enumerate(positions):
                    last_fresh[(layer, int(pos))] = (keys[row], values[row])
            for layer, (positions, keys, values) in enumerate(audit.cached_after):
                for row, pos in enumerate(positions):
                    ref_k, ref_v = last_fresh[(layer, int(pos))]
                    assert keys[row].tobytes() == ref_k.tobytes()
                    assert values[row].tobytes() == ref_v.tobytes()
        for pos, step in decode_step_of.items():
            if step + 1 < len(trace.records):
                assert pos in trace.records[step + 1].compute_set

    def test_decode_served_from_cache_after_delay(self, tiny_weights):
        cfg = SamplerConfig(gen_len=12, steps=12, block_size=12, sample_seed=5,
                            cache=CacheVariant.decode(None))
        _, trace = generate(np.arange(1, 5), cfg, tiny_weights, timed=False)
        for pos, step in trace.decode_step_of().items():
            for later in trace.records[step + 2:]:
                assert pos not in later.compute_set
                assert pos in later.cached_positions

    def test_greedy_bounded_compute(self, tiny_weights):
        w = 4
        cfg = SamplerConfig(gen_len=24, steps=24, block_size=24, sample_seed=5,
                            remasking=Remasking.RANDOM,
                            cache=CacheVariant.greedy(None, w))
        _, trace = generate(np.arange(1, 5), cfg, tiny_weights, timed=False)
        for rec in trace.records[1:]:
            assert rec.rows_computed <= 1 + 1 + (w + 1)

    def test_greedy_keeps_stale_masked_rows_cached(self, tiny_weights):
        cfg = SamplerConfig(gen_len=16, steps=16, block_size=16, sample_seed=5,
                            remasking=Remasking.RANDOM,
                            cache=CacheVariant.greedy(None, 2))
        _, trace = generate(np.arange(1, 5), cfg, tiny_weights, timed=False)
        mid = trace.records[5]
        masked_then = {p for p, s in trace.decode_step_of().items() if s >= 5}
        assert masked_then & set(mid.cached_positions)

    def test_prefill_rows_never_recomputed(self, tiny_weights):
        for variant in (CacheVariant.prefill(), CacheVariant.pd(3)):
            cfg = SamplerConfig(gen_len=12, steps=6, block_size=12,
                                sample_seed=2, cache=variant)
            _, trace = generate(np.arange(1, 9), cfg, tiny_weights,
                                timed=False, kv_audit=True)
            prefill = set(range(8))
            for rec in trace.records[1:]:
                assert not prefill & set(rec.compute_set)
            # byte-identical prefill rows from first commit to the last
            first = trace.records[0].audit.cached_after
            last = trace.records[-1].audit.cached_after
            for layer in range(len(first)):
                pos_f, keys_f, values_f = first[layer]
                pos_l, keys_l, values_l = last[layer]
                sel_f = [i for i, p in enumerate(pos_f) if p in prefill]
                sel_l = [i for i, p in enumerate(pos_l) if p in prefill]
                assert [int(pos_f[i]) for i in sel_f] == \
                       [int(pos_l[i]) for i in sel_l]
                assert keys_f[sel_f].tobytes() == keys_l[sel_l].tobytes()
                assert values_f[sel_f].tobytes() == values_l[sel_l].tobytes()

    def test_layout_union_every_step(self, tiny_weights):
        cfg = SamplerConfig(gen_len=12, steps=6, block_size=6, sample_seed=0,
                            cache=CacheVariant.decode(3))
        _, trace = generate(np.arange(1, 5), cfg, tiny_weights, timed=False)
        for rec in trace.records:
            union = sorted(rec.cached_positions + rec.compute_set)
            assert union == list(range(trace.seq_len))
