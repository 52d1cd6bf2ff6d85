"""Command-line entry points: generate, bench, analyze, selftest.

The run config is a strict JSON file: unknown keys are rejected so typos
in variant names surface immediately. Under ``--deterministic`` the BLAS
thread pool is capped at one thread and wall-clock fields are suppressed,
which makes every output file byte-reproducible for a fixed config.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import statistics
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis
from .cache_engine import (
    CacheVariant,
    ShiftMode,
    VariantKind,
    WindowCenter,
    write_cache_debug,
)
from .model_core import ConfigError, ModelConfig, init_weights
from .sampler import GenerationError, Remasking, SamplerConfig, generate
from .trace import StepTrace

EXIT_OK = 0
EXIT_SELFTEST_FAIL = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_NO_SNAPSHOTS = 4


class RunConfigError(ValueError):
    """Config file problem; the message names the offending field."""


@dataclass
class RunConfig:
    model: ModelConfig
    sampler: SamplerConfig
    prompt: np.ndarray
    output_dir: Path
    deterministic: bool
    snapshot_layer: int | None


def _take(obj: dict, required: dict, optional: dict, context: str) -> dict:
    unknown = set(obj) - set(required) - set(optional)
    if unknown:
        raise RunConfigError(
            f"unknown field '{context}.{sorted(unknown)[0]}'")
    missing = set(required) - set(obj)
    if missing:
        raise RunConfigError(
            f"missing field '{context}.{sorted(missing)[0]}'")
    return {**optional, **obj}


def _parse_cache(obj: dict) -> CacheVariant:
    fields = _take(obj,
                   required={"variant": None},
                   optional={"refresh_interval": None, "window_size": 4,
                             "window_center": "previous",
                             "shift_mode": "un_shift"},
                   context="cache")
    try:
        interval = fields["refresh_interval"]
        return CacheVariant(
            kind=VariantKind(str(fields["variant"]).lower()),
            refresh_interval=None if interval is None else int(interval),
            window_size=int(fields["window_size"]),
            window_center=WindowCenter(fields["window_center"]),
            shift_mode=ShiftMode(fields["shift_mode"]),
        )
    except ValueError as exc:
        raise RunConfigError(f"cache: {exc}") from exc


def _parse_prompt(value, base_dir: Path) -> np.ndarray:
    if isinstance(value, list):
        return np.asarray(value, dtype=np.int64)
    if isinstance(value, dict):
        fields = _take(value, required={"file": None}, optional={},
                       context="prompt")
        text = (base_dir / fields["file"]).read_text()
        return np.asarray([int(tok) for tok in text.split()], dtype=np.int64)
    raise RunConfigError("prompt: expected an id list or {\"file\": path}")


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise RunConfigError(f"invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise RunConfigError("top level must be a JSON object")
    top = _take(raw,
                required={"model": None, "sampler": None, "cache": None,
                          "prompt": None, "output_dir": None},
                optional={"deterministic": False, "snapshots": None},
                context="run")

    model_fields = _take(top["model"], required={
        "n_layers": None, "n_heads": None, "d_model": None, "d_head": None,
        "d_ff": None, "vocab_size": None, "mask_token_id": None,
        "max_positions": None,
    }, optional={"rope_base": 10000.0, "weight_seed": 0}, context="model")
    try:
        model = ModelConfig(**model_fields)
    except (ConfigError, TypeError) as exc:
        raise RunConfigError(f"model: {exc}") from exc

    sampler_fields = _take(top["sampler"], required={
        "gen_len": None, "steps": None, "block_size": None,
    }, optional={"remasking": "low_confidence", "temperature": 0.0,
                 "sample_seed": 0, "snapshot_layer": None}, context="sampler")
    cache = _parse_cache(top["cache"])
    snapshot_layer = top["snapshots"]
    if snapshot_layer is None:
        snapshot_layer = sampler_fields["snapshot_layer"]
    try:
        sampler = SamplerConfig(
            gen_len=sampler_fields["gen_len"],
            steps=sampler_fields["steps"],
            block_size=sampler_fields["block_size"],
            remasking=Remasking(sampler_fields["remasking"]),
            temperature=float(sampler_fields["temperature"]),
            sample_seed=int(sampler_fields["sample_seed"]),
            cache=cache,
            snapshot_layer=snapshot_layer,
        )
    except (ConfigError, ValueError) as exc:
        raise RunConfigError(f"sampler: {exc}") from exc

    return RunConfig(
        model=model,
        sampler=sampler,
        prompt=_parse_prompt(top["prompt"], path.parent),
        output_dir=Path(top["output_dir"]),
        deterministic=bool(top["deterministic"]),
        snapshot_layer=snapshot_layer,
    )


@contextlib.contextmanager
def _thread_cap(deterministic: bool):
    """Honor DKV_THREADS; deterministic mode pins the kernels to one thread."""
    env = os.environ.get("DKV_THREADS")
    if deterministic:
        if env is not None and env != "1":
            raise RunConfigError(
                f"DKV_THREADS={env} conflicts with deterministic mode "
                "(must be 1)")
        limit = 1
    else:
        limit = int(env) if env is not None else None
    if limit is None:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=limit):
        yield


def _write_sequence(tokens: np.ndarray, path: Path) -> None:
    path.write_text(" ".join(str(int(t)) for t in tokens) + "\n")


def _write_snapshots(trace: StepTrace, out_dir: Path) -> None:
    keys, values, decode_steps = trace.snapshot_arrays()
    np.save(out_dir / "snapshots_keys.npy", keys)
    np.save(out_dir / "snapshots_values.npy", values)
    np.save(out_dir / "snapshots_decode_steps.npy", decode_steps)
    (out_dir / "snapshots_meta.json").write_text(json.dumps({
        "snapshot_layer": trace.snapshot_layer,
        "prompt_len": trace.prompt_len,
        "gen_len": trace.gen_len,
        "seq_len": trace.seq_len,
        "steps": trace.total_steps,
        "distance_space": "post-rotary keys/values, full concatenated "
                          "head vectors, natural position order",
    }, indent=2) + "\n")


def _write_outputs(tokens, trace: StepTrace, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_sequence(tokens, out_dir / "sequence.txt")
    trace.write_jsonl(out_dir / "trace.jsonl")
    trace.write_csv(out_dir / "trace_summary.csv")
    write_cache_debug(trace.records, out_dir / "cache_debug.jsonl")
    analysis.build_report(trace).write_json(out_dir / "report.json")
    if trace.has_snapshots():
        _write_snapshots(trace, out_dir)


def cmd_generate(args) -> int:
    try:
        cfg = load_run_config(args.config)
        if args.deterministic:
            cfg.deterministic = True
        if args.snapshots is not None:
            cfg.sampler = SamplerConfig(
                **{**_sampler_kwargs(cfg.sampler), "snapshot_layer": args.snapshots})
    except (RunConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with _thread_cap(cfg.deterministic):
            weights = init_weights(cfg.model)
            tokens, trace = generate(cfg.prompt, cfg.sampler, weights,
                                     timed=not cfg.deterministic)
    except RunConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GenerationError as exc:
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        exc.partial_trace.write_jsonl(cfg.output_dir / "trace.jsonl")
        print(f"runtime error: {exc} (partial trace written)", file=sys.stderr)
        return EXIT_RUNTIME
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _write_outputs(tokens, trace, cfg.output_dir)
    print(f"wrote sequence.txt, trace.jsonl, report.json to {cfg.output_dir}")
    return EXIT_OK


def _sampler_kwargs(cfg: SamplerConfig) -> dict:
    return {
        "gen_len": cfg.gen_len, "steps": cfg.steps,
        "block_size": cfg.block_size, "remasking": cfg.remasking,
        "temperature": cfg.temperature, "sample_seed": cfg.sample_seed,
        "cache": cfg.cache, "snapshot_layer": cfg.snapshot_layer,
    }


def cmd_bench(args) -> int:
    try:
        cfg = load_run_config(args.config)
        if args.deterministic:
            cfg.deterministic = True
        variants = [CacheVariant.parse(v) for v in args.variants.split(",")]
        if args.repeat < 1:
            raise RunConfigError("--repeat must be >= 1")
    except (RunConfigError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    timed = not cfg.deterministic
    rows = []
    baseline_trace = None
    baseline_tokens = None
    try:
        with _thread_cap(cfg.deterministic):
            weights = init_weights(cfg.model)

            def run(variant):
                scfg = SamplerConfig(
                    **{**_sampler_kwargs(cfg.sampler), "cache": variant})
                speeds, tokens, trace = [], None, None
                for _ in range(args.repeat):
                    tokens, trace = generate(cfg.prompt, scfg, weights,
                                             timed=timed)
                    tps = analysis.throughput(trace)
                    if tps is not None:
                        speeds.append(tps)
                return tokens, trace, (statistics.median(speeds)
                                       if speeds else None)

            if not any(v.kind.value == "none" for v in variants):
                baseline_tokens, baseline_trace, _ = run(CacheVariant.none())
            results = []
            for variant in variants:
                tokens, trace, tps = run(variant)
                if variant.kind.value == "none":
                    baseline_tokens, baseline_trace = tokens, trace
                results.append((variant, tokens, trace, tps))
    except GenerationError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    base_counters = analysis.compute_counters(baseline_trace)
    for variant, tokens, trace, tps in results:
        counters = analysis.compute_counters(trace)
        rows.append({
            "variant": variant.describe(),
            "tokens_per_s": "" if tps is None else f"{tps:.3f}",
            "cache_ratio": f"{analysis.cache_ratio(trace):.6f}",
            "total_rows": counters.total_query_rows,
            "mac_reduction": f"{1.0 - counters.total_macs / base_counters.total_macs:.6f}",
            "output_match": int(np.array_equal(tokens, baseline_tokens)),
        })
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    out_path = cfg.output_dir / "bench.csv"
    with open(out_path, "w") as fh:
        header = ["variant", "tokens_per_s", "cache_ratio", "total_rows",
                  "mac_reduction", "output_match"]
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(row[h]) for h in header) + "\n")
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    trace_path = Path(args.trace)
    run_dir = trace_path.parent
    needed = [run_dir / "snapshots_keys.npy", run_dir / "snapshots_values.npy",
              run_dir / "snapshots_decode_steps.npy"]
    if not trace_path.exists():
        print(f"config error: trace {trace_path} not found", file=sys.stderr)
        return EXIT_CONFIG
    if not all(p.exists() for p in needed):
        print("no snapshots found next to the trace; rerun generate with "
              "sampler.snapshot_layer (or --snapshots LAYER)", file=sys.stderr)
        return EXIT_NO_SNAPSHOTS
    keys = np.load(needed[0])
    values = np.load(needed[1])
    decode_steps = np.load(needed[2])
    result = analysis.kv_dynamics(keys, values, decode_steps)
    out_dir = Path(args.output_dir) if args.output_dir else run_dir
    written = analysis.write_dynamics_csvs(result, out_dir)
    print(f"wrote {len(written)} dynamics files to {out_dir} "
          f"(reveal-spike fraction {result.spike_fraction:.3f})")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    ok = run_selftest(fault_inject=args.fault_inject)
    return EXIT_OK if ok else EXIT_SELFTEST_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dkvcache",
        description="Delayed KV-cache inference engine for masked diffusion "
                    "language models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="run one generation")
    gen.add_argument("--config", required=True, help="run config JSON")
    gen.add_argument("--deterministic", action="store_true",
                     help="single-thread kernels, suppress wall-clock fields")
    gen.add_argument("--snapshots", type=int, default=None, metavar="LAYER",
                     help="capture per-step K/V snapshots for this layer")
    gen.set_defaults(fn=cmd_generate)

    bench = sub.add_parser("bench", help="compare cache variants on one config")
    bench.add_argument("--config", required=True)
    bench.add_argument("--variants", required=True,
                       help="comma list, e.g. none,decode:8,greedy:2:4")
    bench.add_argument("--repeat", type=int, default=1)
    bench.add_argument("--deterministic", action="store_true")
    bench.set_defaults(fn=cmd_bench)

    ana = sub.add_parser("analyze", help="representation dynamics from a trace")
    ana.add_argument("trace", help="path to trace.jsonl (snapshots alongside)")
    ana.add_argument("--output-dir", default=None)
    ana.set_defaults(fn=cmd_analyze)

    selftest = sub.add_parser("selftest", help="fast embedded acceptance subset")
    selftest.add_argument("--fault-inject", default=None,
                          help=argparse.SUPPRESS)
    selftest.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
