"""Delayed KV-cache inference engine for masked diffusion language models.

A desk-scale toy transformer plus a cache engine implementing delayed
key/value reuse for masked-denoising generation, with an always-recompute
baseline, exact compute counters, and representation-dynamics analysis.
"""

from .model_core import (
    ConfigError,
    ForwardResult,
    KVSlab,
    ModelConfig,
    ModelWeights,
    attention,
    forward_full,
    forward_partial,
    init_weights,
    load_weights,
    rope_rotate,
    save_weights,
)
from .cache_engine import (
    CacheEngine,
    CacheVariant,
    ComputePlan,
    LayoutError,
    ShiftMode,
    VariantKind,
    WindowCenter,
    build_layout,
    cache_entry_step,
    concat_reorder,
    greedy_window,
    plan_compute_set,
    scatter_outputs,
    shift_rows,
)
from .sampler import (
    GenerationError,
    GenerationState,
    NoiseSchedule,
    Remasking,
    SamplerConfig,
    alpha_bar,
    corrupt,
    decode_step,
    generate,
    predict_x0,
    select_to_unmask,
    tokens_per_step_schedule,
)
from .trace import RunReport, StepRecord, StepTrace
from . import analysis

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "analysis",
    "alpha_bar",
    "attention",
    "build_layout",
    "cache_entry_step",
    "CacheEngine",
    "CacheVariant",
    "ComputePlan",
    "concat_reorder",
    "ConfigError",
    "corrupt",
    "decode_step",
    "forward_full",
    "forward_partial",
    "ForwardResult",
    "generate",
    "GenerationError",
    "GenerationState",
    "greedy_window",
    "init_weights",
    "KVSlab",
    "LayoutError",
    "load_weights",
    "ModelConfig",
    "ModelWeights",
    "NoiseSchedule",
    "plan_compute_set",
    "predict_x0",
    "Remasking",
    "rope_rotate",
    "RunReport",
    "SamplerConfig",
    "save_weights",
    "scatter_outputs",
    "select_to_unmask",
    "ShiftMode",
    "shift_rows",
    "StepRecord",
    "StepTrace",
    "tokens_per_step_schedule",
    "VariantKind",
    "WindowCenter",
]
