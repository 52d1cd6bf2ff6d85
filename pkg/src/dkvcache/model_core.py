"""Minimal bidirectional transformer with rotary positions.

The model exists to exercise cache scheduling, so it supports two entry
points: a full forward pass, and a partial pass that recomputes hidden
states only for a chosen compute set while attending over cached key/value
rows injected for the remaining positions. Cached keys keep the rotary
rotation from the step that produced them, which makes attention
position-correct regardless of how rows are ordered in storage.

Everything is float32. Forward passes are deterministic: identical inputs
produce bit-identical outputs as long as the BLAS thread count does not
change between calls.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ConfigError",
    "ModelConfig",
    "LayerWeights",
    "ModelWeights",
    "KVSlab",
    "ForwardResult",
    "init_weights",
    "rope_rotate",
    "attention",
    "forward_full",
    "forward_partial",
    "save_weights",
    "load_weights",
]

_RMS_EPS = 1e-6


class ConfigError(ValueError):
    """A configuration invariant does not hold."""


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the toy transformer."""

    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    d_ff: int
    vocab_size: int
    mask_token_id: int
    max_positions: int
    rope_base: float = 10000.0
    weight_seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for name in ("n_layers", "n_heads", "d_model", "d_head", "d_ff",
                     "vocab_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(
                f"d_model ({self.d_model}) != n_heads ({self.n_heads}) "
                f"* d_head ({self.d_head})")
        if self.d_head % 2 != 0:
            raise ConfigError(
                f"d_head must be even for rotary pairing, got {self.d_head}")
        if not 0 <= self.mask_token_id < self.vocab_size:
            raise ConfigError(
                f"mask_token_id ({self.mask_token_id}) must be "
                f"< vocab_size ({self.vocab_size})")
        if self.rope_base <= 0:
            raise ConfigError(f"rope_base must be positive, got {self.rope_base}")


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    attn_gain: np.ndarray
    ffn_gain: np.ndarray


@dataclass(frozen=True)
class ModelWeights:
    """Immutable model parameters; arrays are write-protected after init."""

    config: ModelConfig
    embedding: np.ndarray
    layers: tuple[LayerWeights, ...]
    final_gain: np.ndarray
    head: np.ndarray


@dataclass
class KVSlab:
    """Per-layer key/value rows in storage layout order.

    ``row_positions[i]`` is the original sequence position of row ``i``.
    Keys already carry the rotary rotation for their original position.
    """

    layer: int
    keys: np.ndarray
    values: np.ndarray
    row_positions: np.ndarray

    @classmethod
    def empty(cls, layer: int, width: int) -> "KVSlab":
        return cls(
            layer=layer,
            keys=np.zeros((0, width), dtype=np.float32),
            values=np.zeros((0, width), dtype=np.float32),
            row_positions=np.zeros(0, dtype=np.int64),
        )

    @property
    def n_rows(self) -> int:
        return int(self.row_positions.shape[0])

    def validate(self, seq_len: int) -> None:
        n = self.n_rows
        if self.keys.shape[0] != n or self.values.shape[0] != n:
            raise ValueError(
                f"layer {self.layer}: cache row/position mismatch "
                f"(keys {self.keys.shape[0]}, values {self.values.shape[0]}, "
                f"positions {n})")
        if n and len(np.unique(self.row_positions)) != n:
            raise ValueError(f"layer {self.layer}: duplicate cached positions")
        if n and (self.row_positions.min() < 0 or self.row_positions.max() >= seq_len):
            raise ValueError(f"layer {self.layer}: cached position out of range")
        if n and not (np.isfinite(self.keys).all() and np.isfinite(self.values).all()):
            raise ValueError(f"layer {self.layer}: non-finite cache entries")


@dataclass
class ForwardResult:
    """Logits for the compute set plus the fresh K/V rows it produced."""

    logits: np.ndarray
    fresh_kv: list[KVSlab]


def _uniform(rng: np.random.Generator, d_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / math.sqrt(d_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def init_weights(config: ModelConfig) -> ModelWeights:
    """Deterministically initialize weights from (config, weight_seed).

    Matrices are drawn uniformly in [-1/sqrt(d_in), +1/sqrt(d_in)]; norm
    gains start at one. The draw order is fixed, so identical inputs give
    byte-identical weights.
    """
    config.validate()
    rng = np.random.default_rng(config.weight_seed)
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    embedding = _freeze(_uniform(rng, d, (v, d)))
    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            wq=_freeze(_uniform(rng, d, (d, d))),
            wk=_freeze(_uniform(rng, d, (d, d))),
            wv=_freeze(_uniform(rng, d, (d, d))),
            wo=_freeze(_uniform(rng, d, (d, d))),
            w1=_freeze(_uniform(rng, d, (d, f))),
            w2=_freeze(_uniform(rng, f, (f, d))),
            attn_gain=_freeze(np.ones(d, dtype=np.float32)),
            ffn_gain=_freeze(np.ones(d, dtype=np.float32)),
        ))
    head = _freeze(_uniform(rng, d, (d, v)))
    final_gain = _freeze(np.ones(d, dtype=np.float32))
    return ModelWeights(
        config=config,
        embedding=embedding,
        layers=tuple(layers),
        final_gain=final_gain,
        head=head,
    )


def _rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    scale = 1.0 / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + _RMS_EPS)
    return x * scale * gain


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)))


def rope_rotate(
    states: np.ndarray,
    position_ids,
    base: float,
    d_head: int,
    max_position: int | None = None,
) -> np.ndarray:
    """Apply rotary rotation per interleaved head pair (dims 2i, 2i+1).

    ``states`` is [n, n_heads * d_head]; row ``i`` is rotated by the angle
    derived from ``position_ids[i]``. The same kernel serves queries and
    keys so cached and fresh rows stay mutually consistent.
    """
    positions = np.asarray(position_ids, dtype=np.int64)
    n, width = states.shape
    if positions.shape[0] != n:
        raise ValueError(
            f"got {positions.shape[0]} position ids for {n} rows")
    if n and positions.min() < 0:
        raise ValueError("position out of range: negative position id")
    if max_position is not None and n and positions.max() >= max_position:
        raise ValueError(
            f"position out of range: {positions.max()} >= {max_position}")
    if width % d_head != 0:
        raise ValueError(f"state width {width} not a multiple of d_head {d_head}")
    half = d_head // 2
    inv_freq = float(base) ** (-np.arange(half, dtype=np.float64) * (2.0 / d_head))
    angles = positions[:, None].astype(np.float64) * inv_freq[None, :]
    cos = np.tile(np.cos(angles), (1, width // d_head)).astype(np.float32)
    sin = np.tile(np.sin(angles), (1, width // d_head)).astype(np.float32)
    even = states[:, 0::2]
    odd = states[:, 1::2]
    out = np.empty_like(states)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out


def attention(
    queries: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    scale: float,
    n_heads: int = 1,
    return_weights: bool = False,
):
    """Bidirectional softmax attention over all key rows.

    Rows of ``queries``/``keys``/``values`` are full-width vectors that are
    split into ``n_heads`` slices internally. Softmax uses max-subtraction;
    weight rows are row-stochastic. There is no causal mask.
    """
    if keys.shape[0] == 0:
        raise ValueError("empty key set")
    if keys.shape[0] != values.shape[0]:
        raise ValueError(
            f"keys ({keys.shape[0]}) and values ({values.shape[0]}) row "
            "counts differ")
    nq, width = queries.shape
    dh = width // n_heads
    q = queries.reshape(nq, n_heads, dh).transpose(1, 0, 2)
    k = keys.reshape(-1, n_heads, dh).transpose(1, 0, 2)
    v = values.reshape(-1, n_heads, dh).transpose(1, 0, 2)
    scores = np.matmul(q, k.transpose(0, 2, 1)) * np.float32(scale)
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = np.matmul(weights, v).transpose(1, 0, 2).reshape(nq, width)
    if return_weights:
        return out, weights
    return out


def _validate_tokens(tokens: np.ndarray, config: ModelConfig) -> None:
    if tokens.ndim != 1:
        raise ValueError(f"tokens must be one-dimensional, got shape {tokens.shape}")
    if tokens.shape[0] > config.max_positions:
        raise ValueError(
            f"sequence length {tokens.shape[0]} exceeds max_positions "
            f"{config.max_positions}")
    if tokens.shape[0] and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ValueError("invalid token id: outside [0, vocab_size)")


def _validate_cache(
    cache: list[KVSlab] | None,
    compute_set: np.ndarray,
    seq_len: int,
    config: ModelConfig,
) -> np.ndarray:
    """Check the cached/fresh split covers the sequence; return cached positions."""
    if cache is None or all(slab.n_rows == 0 for slab in (cache or [])):
        cached_positions = np.zeros(0, dtype=np.int64)
    else:
        if len(cache) != config.n_layers:
            raise ValueError(
                f"cache layer count mismatch: got {len(cache)}, "
                f"expected {config.n_layers}")
        cached_positions = cache[0].row_positions
        for i, slab in enumerate(cache):
            slab.validate(seq_len)
            if slab.layer != i:
                raise ValueError(f"cache slab at index {i} claims layer {slab.layer}")
            if not np.array_equal(slab.row_positions, cached_positions):
                raise ValueError(
                    "cache row/position mismatch: layers disagree on cached "
                    "positions")
    combined = np.concatenate([cached_positions, compute_set])
    if len(np.unique(combined)) != combined.shape[0]:
        raise ValueError("overlapping cached and compute positions")
    if combined.shape[0] != seq_len or not np.array_equal(
            np.sort(combined), np.arange(seq_len, dtype=np.int64)):
        raise ValueError(
            "incomplete split: cached and compute positions must partition "
            "the sequence")
    return cached_positions


def forward_partial(
    tokens,
    compute_set,
    cache: list[KVSlab] | None,
    weights: ModelWeights,
) -> ForwardResult:
    """Forward pass over the compute set only, attending over cache + fresh rows.

    ``compute_set`` is an ordered position list; hidden states and logits
    are produced for exactly those rows, in that order. Per layer the
    attention keys/values are the concatenation [cached rows ; fresh rows],
    i.e. the storage layout. The cached rows must have been rotated with
    their original positions.
    """
    config = weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    _validate_tokens(tokens, config)
    seq_len = tokens.shape[0]
    comp = np.asarray(compute_set, dtype=np.int64)
    _validate_cache(cache, comp, seq_len, config)
    use_cache = cache is not None and cache[0].n_rows > 0

    h = weights.embedding[tokens[comp]].copy()
    scale = 1.0 / math.sqrt(config.d_head)
    fresh: list[KVSlab] = []
    for idx, layer in enumerate(weights.layers):
        normed = _rms_norm(h, layer.attn_gain)
        q = rope_rotate(normed @ layer.wq, comp, config.rope_base,
                        config.d_head, config.max_positions)
        k = rope_rotate(normed @ layer.wk, comp, config.rope_base,
                        config.d_head, config.max_positions)
        v = normed @ layer.wv
        if use_cache:
            keys_all = np.concatenate([cache[idx].keys, k], axis=0)
            values_all = np.concatenate([cache[idx].values, v], axis=0)
        else:
            keys_all, values_all = k, v
        attended = attention(q, keys_all, values_all, scale, config.n_heads)
        h = h + attended @ layer.wo
        h = h + _gelu(_rms_norm(h, layer.ffn_gain) @ layer.w1) @ layer.w2
        fresh.append(KVSlab(layer=idx, keys=k, values=v, row_positions=comp.copy()))
    logits = _rms_norm(h, weights.final_gain) @ weights.head
    return ForwardResult(logits=logits, fresh_kv=fresh)


def forward_full(tokens, weights: ModelWeights) -> ForwardResult:
    """Full bidirectional pass: every position computed, natural order."""
    tokens = np.asarray(tokens, dtype=np.int64)
    return forward_partial(tokens, np.arange(tokens.shape[0]), None, weights)


def _weight_items(weights: ModelWeights):
    yield "embedding", weights.embedding
    for i, layer in enumerate(weights.layers):
        for name in ("wq", "wk", "wv", "wo", "w1", "w2", "attn_gain", "ffn_gain"):
            yield f"layer{i}.{name}", getattr(layer, name)
    yield "final_gain", weights.final_gain
    yield "head", weights.head


def save_weights(weights: ModelWeights, path) -> None:
    """Dump weights as flat little-endian float32 plus a JSON sidecar."""
    path = Path(path)
    tensors = []
    with open(path, "wb") as fh:
        for name, arr in _weight_items(weights):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            tensors.append({"name": name, "shape": list(arr.shape)})
    sidecar = {"config": asdict(weights.config), "tensors": tensors}
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2) + "\n")


def load_weights(path) -> ModelWeights:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    config = ModelConfig(**sidecar["config"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    arrays = {}
    offset = 0
    for entry in sidecar["tensors"]:
        size = int(np.prod(entry["shape"]))
        arrays[entry["name"]] = _freeze(
            raw[offset:offset + size].reshape(entry["shape"]).astype(np.float32))
        offset += size
    if offset != raw.shape[0]:
        raise ValueError(
            f"weight file has {raw.shape[0]} floats, sidecar describes {offset}")
    layers = tuple(
        LayerWeights(**{
            name: arrays[f"layer{i}.{name}"]
            for name in ("wq", "wk", "wv", "wo", "w1", "w2",
                         "attn_gain", "ffn_gain")
        })
        for i in range(config.n_layers)
    )
    return ModelWeights(
        config=config,
        embedding=arrays["embedding"],
        layers=layers,
        final_gain=arrays["final_gain"],
        head=arrays["head"],
    )
