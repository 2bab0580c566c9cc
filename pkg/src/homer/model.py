"""Minimal decoder-only transformer core.

Pre-norm decoder blocks with RMS normalization, rotary position embeddings
and a gated MLP, operating entirely in float32. Every forward exposes the
introspection data the compression pipeline needs: per-layer key/value pairs
(with RoPE already applied to keys) and the pre-softmax attention logits of
the final token against the full attended range.

All functions here are pure with respect to the weights; they can be called
from multiple threads concurrently.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation, LoadError

WEIGHT_MAGIC = b"HOMERWT1"
RMS_EPS = 1e-5
ACTIVATIONS = ("silu", "gelu")

DEFAULT_PLAIN_CAP = 16384


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions of the toy transformer.

    max_chunk is the attention-unit size C used by the compression pipeline;
    it also bounds the calibrated distance range.
    """

    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    vocab_size: int
    rope_base: float = 10000.0
    max_chunk: int = 64
    d_ff: int = 0  # 0 means "derive as 2 * d_model"
    activation: str = "silu"

    def __post_init__(self):
        if min(self.n_layers, self.n_heads, self.d_model, self.d_head, self.vocab_size) < 1:
            raise ConfigError("all model dimensions must be >= 1")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(
                f"d_model={self.d_model} must equal n_heads*d_head={self.n_heads * self.d_head}"
            )
        if self.d_head % 2 != 0:
            raise ConfigError("d_head must be even for rotary embeddings")
        if self.rope_base <= 0:
            raise ConfigError("rope_base must be positive")
        if self.max_chunk < 4:
            raise ConfigError("max_chunk must be >= 4")
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 2 * self.d_model)
        if self.d_ff < 1:
            raise ConfigError("d_ff must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    attn_norm: np.ndarray
    mlp_norm: np.ndarray


@dataclass
class ModelWeights:
    config: ModelConfig
    tok_embedding: np.ndarray  # [vocab, d_model]
    layers: list[LayerWeights]
    final_norm: np.ndarray  # [d_model]
    head: np.ndarray  # [d_model, vocab]


@dataclass
class LayerKV:
    """Per-token keys and values produced by one layer.

    Keys carry RoPE already applied. position_ids are the (possibly scaled)
    ids the rotation used. provenance is attached by the scheduler, which
    tracks token identity across pruning and merging; raw forwards leave it
    None.
    """

    layer_index: int
    keys: np.ndarray  # [n, n_heads, d_head]
    values: np.ndarray  # [n, n_heads, d_head]
    position_ids: np.ndarray  # [n] float32
    provenance: np.ndarray | None = None

    def __len__(self) -> int:
        return self.keys.shape[0]


@dataclass
class AttentionRecord:
    """Pre-softmax attention logits of the final token's query, per head,
    against every kv position in the attended range."""

    layer_index: int
    logits: np.ndarray  # [n_heads, attended_len] float32

    def __len__(self) -> int:
        return self.logits.shape[1]

    def head_mean(self) -> np.ndarray:
        """Arithmetic mean over heads; the aggregation the pruner consumes."""
        return self.logits.mean(axis=0)


@dataclass
class ForwardResult:
    kvs: list[LayerKV]
    records: list[AttentionRecord]
    logits: np.ndarray  # [n, vocab]
    hidden: np.ndarray  # [n, d_model], post final layer, pre final norm


def _rms_norm(x: np.ndarray) -> np.ndarray:
    scale = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + np.float32(RMS_EPS))
    return x / scale


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _activate(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "silu":
        return x / (np.float32(1.0) + np.exp(-x))
    # tanh approximation of gelu
    c = np.float32(0.7978845608028654)
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * (x + np.float32(0.044715) * x * x * x)))


def _rope_angles(positions: np.ndarray, d_head: int, rope_base: float) -> tuple[np.ndarray, np.ndarray]:
    j = np.arange(d_head // 2, dtype=np.float32)
    inv_freq = np.float32(rope_base) ** (np.float32(-2.0) * j / np.float32(d_head))
    theta = positions.astype(np.float32)[:, None] * inv_freq[None, :]  # [n, d_head/2]
    return np.cos(theta), np.sin(theta)


def rope_apply(vector: np.ndarray, position: float, rope_base: float) -> np.ndarray:
    """Rotate one d_head vector by the rotary embedding at `position`.

    Pair j = (dims 2j, 2j+1) rotates by angle position * rope_base**(-2j/d_head).
    Rotation is orthogonal, so the vector norm is preserved.
    """
    v = np.asarray(vector, dtype=np.float32)
    if v.ndim != 1 or v.shape[0] % 2 != 0:
        raise ConfigError("rope_apply requires a 1-d vector of even length")
    out = _rope_rotate(v[None, None, :], np.asarray([position], dtype=np.float32), rope_base)
    return out[0, 0]


def _rope_rotate(x: np.ndarray, positions: np.ndarray, rope_base: float) -> np.ndarray:
    """Apply rotary rotation to [n, heads, d_head] at the given positions."""
    cos, sin = _rope_angles(positions, x.shape[-1], rope_base)
    cos = cos[:, None, :]
    sin = sin[:, None, :]
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def layer_forward(
    weights: ModelWeights,
    layer: int,
    hidden: np.ndarray,
    positions: np.ndarray,
    past_kv: LayerKV | None = None,
) -> tuple[np.ndarray, LayerKV, AttentionRecord]:
    """One decoder block over `hidden` [n, d_model].

    Attention is causal over past_kv ++ current tokens. The returned LayerKV
    covers the current tokens only; the AttentionRecord covers the full
    attended range (past + current).
    """
    cfg = weights.config
    n = hidden.shape[0]
    if n < 1:
        raise ContractViolation("layer_forward requires at least one token")
    if hidden.ndim != 2 or hidden.shape[1] != cfg.d_model:
        raise ContractViolation(f"hidden must be [n, {cfg.d_model}]")
    if positions.shape[0] != n:
        raise ContractViolation("positions must align with hidden")
    if past_kv is not None and past_kv.layer_index != layer:
        raise ContractViolation(
            f"past_kv is from layer {past_kv.layer_index}, expected {layer}"
        )

    lw = weights.layers[layer]
    heads, dh = cfg.n_heads, cfg.d_head

    x = _rms_norm(hidden) * lw.attn_norm
    q = (x @ lw.wq).reshape(n, heads, dh)
    k = (x @ lw.wk).reshape(n, heads, dh)
    v = (x @ lw.wv).reshape(n, heads, dh)
    q = _rope_rotate(q, positions, cfg.rope_base)
    k = _rope_rotate(k, positions, cfg.rope_base)

    if past_kv is not None:
        m = len(past_kv)
        keys = np.concatenate([past_kv.keys, k], axis=0)
        values = np.concatenate([past_kv.values, v], axis=0)
    else:
        m = 0
        keys, values = k, v

    scale = np.float32(1.0 / np.sqrt(dh))
    logits = np.empty((heads, n, m + n), dtype=np.float32)
    for h in range(heads):
        logits[h] = (q[:, h, :] @ keys[:, h, :].T) * scale

    # key j is visible to query i iff j <= m + i
    visible = np.arange(m + n, dtype=np.int64)[None, :] <= (m + np.arange(n, dtype=np.int64))[:, None]
    masked = np.where(visible[None, :, :], logits, np.float32(-np.inf))
    attn = _softmax(masked)

    ctx = np.empty((n, heads, dh), dtype=np.float32)
    for h in range(heads):
        ctx[:, h, :] = attn[h] @ values[:, h, :]
    hidden = hidden + ctx.reshape(n, cfg.d_model) @ lw.wo

    y = _rms_norm(hidden) * lw.mlp_norm
    hidden = hidden + (_activate(y @ lw.w_gate, cfg.activation) * (y @ lw.w_up)) @ lw.w_down

    kv = LayerKV(layer, k, v, positions.astype(np.float32).copy())
    record = AttentionRecord(layer, logits[:, -1, :].copy())
    return hidden, kv, record


def embed_tokens(weights: ModelWeights, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= weights.config.vocab_size):
        raise ContractViolation("token id out of vocabulary range")
    return weights.tok_embedding[tokens]


def output_logits(weights: ModelWeights, hidden: np.ndarray) -> np.ndarray:
    """Final RMS norm followed by the output head."""
    return (_rms_norm(hidden) * weights.final_norm) @ weights.head


def forward_pass(
    weights: ModelWeights,
    tokens: np.ndarray,
    positions: np.ndarray | None = None,
) -> ForwardResult:
    """Full-context forward over all layers, collecting kv and attention
    records per layer."""
    tokens = np.asarray(tokens, dtype=np.int32)
    if tokens.size == 0:
        raise ContractViolation("forward requires at least one token")
    if positions is None:
        positions = np.arange(tokens.shape[0], dtype=np.float32)
    positions = np.asarray(positions, dtype=np.float32)
    hidden = embed_tokens(weights, tokens)
    kvs: list[LayerKV] = []
    records: list[AttentionRecord] = []
    for layer in range(weights.config.n_layers):
        hidden, kv, record = layer_forward(weights, layer, hidden, positions)
        kvs.append(kv)
        records.append(record)
    return ForwardResult(kvs, records, output_logits(weights, hidden), hidden)


def plain_forward(
    weights: ModelWeights,
    tokens: np.ndarray,
    positions: np.ndarray | None = None,
    hard_cap: int = DEFAULT_PLAIN_CAP,
) -> tuple[list[LayerKV], np.ndarray]:
    """Reference full-context forward: per-layer kv plus per-token logits."""
    tokens = np.asarray(tokens, dtype=np.int32)
    if tokens.shape[0] > hard_cap:
        raise ContractViolation(f"input of {tokens.shape[0]} tokens exceeds hard cap {hard_cap}")
    result = forward_pass(weights, tokens, positions)
    return result.kvs, result.logits


# ---------------------------------------------------------------------------
# weight files: 8-byte magic, ModelConfig fields as little-endian u32, then
# tensors in declaration order as row-major float32.

_HEADER = struct.Struct("<9I")


def _config_fields(cfg: ModelConfig) -> tuple[int, ...]:
    return (
        cfg.n_layers,
        cfg.n_heads,
        cfg.d_model,
        cfg.d_head,
        cfg.d_ff,
        cfg.vocab_size,
        int(round(cfg.rope_base)),
        cfg.max_chunk,
        ACTIVATIONS.index(cfg.activation),
    )


def _tensor_order(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    ordered: list[tuple[str, tuple[int, ...]]] = [("tok_embedding", (v, d))]
    for i in range(cfg.n_layers):
        ordered += [
            (f"layers[{i}].wq", (d, d)),
            (f"layers[{i}].wk", (d, d)),
            (f"layers[{i}].wv", (d, d)),
            (f"layers[{i}].wo", (d, d)),
            (f"layers[{i}].w_gate", (d, f)),
            (f"layers[{i}].w_up", (d, f)),
            (f"layers[{i}].w_down", (f, d)),
            (f"layers[{i}].attn_norm", (d,)),
            (f"layers[{i}].mlp_norm", (d,)),
        ]
    ordered += [("final_norm", (d,)), ("head", (d, v))]
    return ordered


def _iter_tensors(weights: ModelWeights):
    yield weights.tok_embedding
    for lw in weights.layers:
        yield from (lw.wq, lw.wk, lw.wv, lw.wo, lw.w_gate, lw.w_up, lw.w_down, lw.attn_norm, lw.mlp_norm)
    yield weights.final_norm
    yield weights.head


def save_weights(weights: ModelWeights, path) -> None:
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(_HEADER.pack(*_config_fields(weights.config)))
        for tensor in _iter_tensors(weights):
            fh.write(np.ascontiguousarray(tensor, dtype=np.float32).tobytes())


def load_weights(path) -> ModelWeights:
    """Parse a weight file. Deterministic given identical file bytes."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(WEIGHT_MAGIC)] != WEIGHT_MAGIC:
        raise LoadError("bad magic")
    off = len(WEIGHT_MAGIC)
    if len(blob) < off + _HEADER.size:
        raise LoadError(f"unexpected EOF in header at byte {len(blob)}")
    fields = _HEADER.unpack_from(blob, off)
    off += _HEADER.size
    if fields[8] >= len(ACTIVATIONS):
        raise LoadError(f"unknown activation code {fields[8]}")
    try:
        cfg = ModelConfig(
            n_layers=fields[0],
            n_heads=fields[1],
            d_model=fields[2],
            d_head=fields[3],
            d_ff=fields[4],
            vocab_size=fields[5],
            rope_base=float(fields[6]),
            max_chunk=fields[7],
            activation=ACTIVATIONS[fields[8]],
        )
    except ConfigError as exc:
        raise LoadError(f"dimension mismatch in header: {exc}") from exc

    tensors: list[np.ndarray] = []
    for name, shape in _tensor_order(cfg):
        count = int(np.prod(shape))
        nbytes = 4 * count
        if off + nbytes > len(blob):
            raise LoadError(f"unexpected EOF at tensor {name}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
        if not np.isfinite(arr).all():
            bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
            raise LoadError(f"non-finite value in tensor {name} at byte offset {off + 4 * bad}")
        tensors.append(arr.astype(np.float32))
        off += nbytes
    if off != len(blob):
        raise LoadError(f"{len(blob) - off} trailing bytes after last tensor")

    it = iter(tensors)
    tok_embedding = next(it)
    layers = []
    for _ in range(cfg.n_layers):
        layers.append(LayerWeights(*(next(it) for _ in range(9))))
    final_norm = next(it)
    head = next(it)
    return ModelWeights(cfg, tok_embedding, layers, final_norm, head)


def random_weights(config: ModelConfig, seed: int = 0) -> ModelWeights:
    """Seeded random weights for tests and toy runs."""
    rng = np.random.default_rng(seed)
    d, f, v = config.d_model, config.d_ff, config.vocab_size

    def mat(rows: int, cols: int, fan_in: int) -> np.ndarray:
        return rng.standard_normal((rows, cols), dtype=np.float32) * np.float32(fan_in**-0.5)

    layers = [
        LayerWeights(
            wq=mat(d, d, d),
            wk=mat(d, d, d),
            wv=mat(d, d, d),
            wo=mat(d, d, d),
            w_gate=mat(d, f, d),
            w_up=mat(d, f, d),
            w_down=mat(f, d, f),
            attn_norm=np.ones(d, dtype=np.float32),
            mlp_norm=np.ones(d, dtype=np.float32),
        )
        for _ in range(config.n_layers)
    ]
    return ModelWeights(
        config=config,
        tok_embedding=mat(v, d, d),
        layers=layers,
        final_norm=np.ones(d, dtype=np.float32),
        head=mat(d, v, d),
    )
