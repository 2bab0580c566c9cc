"""Shared state types: chunk processing state, the kv memory ledger, and the
final generation cache (plus its file format)."""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, LoadError
from .model import ACTIVATIONS, ModelConfig, LayerKV

CACHE_MAGIC = b"HOMERKV1"


@dataclass
class ChunkState:
    """One tree node's live state during hierarchical merging.

    `hidden` holds the current hidden states of the surviving tokens.
    `archived` holds one LayerKV per traversed layer (contiguous from layer
    0); before refinement the archived layers hold supersets of the current
    provenance set, after refinement exactly the current set.
    """

    hidden: np.ndarray  # [n, d_model] float32
    position_ids: np.ndarray  # [n] float32
    affix_mask: np.ndarray  # [n] bool
    provenance: np.ndarray  # [n] int64
    p: int
    s: int
    archived: list[LayerKV] = field(default_factory=list)
    span: tuple[int, int] = (0, 0)
    pruned_provenance: np.ndarray | None = None
    # hidden states at the node's top layer, captured before pruning; the
    # root's final row seeds generation
    top_hidden: np.ndarray | None = None

    def __len__(self) -> int:
        return self.hidden.shape[0]

    @property
    def depth(self) -> int:
        return len(self.archived)


class MemoryLedger:
    """Live count of retained kv entries in (token x layer) units.

    charge/release are the only mutators; both are atomic so the ledger can
    be shared across concurrently evaluated nodes. unit_bytes is the cost M
    of one entry; reported figures stay in units.
    """

    def __init__(self, unit_bytes: int = 1):
        self.unit_bytes = unit_bytes
        self.live = 0
        self.peak = 0
        self.charged = 0
        self.released = 0
        self._lock = threading.Lock()

    def charge(self, units: int) -> None:
        if units < 0:
            raise ContractViolation("charge must be non-negative")
        with self._lock:
            self.live += units
            self.charged += units
            if self.live > self.peak:
                self.peak = self.live

    def release(self, units: int) -> None:
        if units < 0:
            raise ContractViolation("release must be non-negative")
        with self._lock:
            if units > self.live:
                raise ContractViolation("release exceeds live units")
            self.live -= units
            self.released += units

    def check_conservation(self) -> None:
        if self.charged - self.released != self.live:
            raise ContractViolation("ledger conservation violated")


@dataclass
class HomerCache:
    """Fixed-length per-layer kv embeddings used as the generation cache.

    Every layer holds the same tokens (same provenance sequence) after
    propagative refinement. next_grid_id is the first unscaled position id
    for generated tokens; actual ids are grid/pi_scale. next_logits seeds
    generation: the output distribution of the final input token (None for
    an empty cache).
    """

    config: ModelConfig
    layers: list[LayerKV]
    next_grid_id: int
    pi_scale: float = 1.0
    next_logits: np.ndarray | None = None

    @property
    def length(self) -> int:
        return len(self.layers[0]) if self.layers else 0

    def next_position(self, offset: int = 0) -> np.float32:
        return np.float32((self.next_grid_id + offset) / self.pi_scale)

    def validate(self) -> None:
        lengths = {len(kv) for kv in self.layers}
        if len(lengths) > 1:
            raise ContractViolation(f"cache layers have unequal lengths {sorted(lengths)}")


_CACHE_HEADER = struct.Struct("<9I")  # config echo, same field order as weight files
_CACHE_META = struct.Struct("<IIIf")  # length, next_grid_id, has_logits, pi_scale


def save_cache(cache: HomerCache, path) -> None:
    cfg = cache.config
    cache.validate()
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(
            _CACHE_HEADER.pack(
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
        )
        fh.write(
            _CACHE_META.pack(
                cache.length,
                cache.next_grid_id,
                1 if cache.next_logits is not None else 0,
                float(cache.pi_scale),
            )
        )
        for kv in cache.layers:
            fh.write(struct.pack("<I", len(kv)))
            fh.write(np.ascontiguousarray(kv.position_ids, dtype=np.float32).tobytes())
            fh.write(np.ascontiguousarray(kv.keys, dtype=np.float32).tobytes())
            fh.write(np.ascontiguousarray(kv.values, dtype=np.float32).tobytes())
        if cache.next_logits is not None:
            fh.write(np.ascontiguousarray(cache.next_logits, dtype=np.float32).tobytes())


def load_cache(path) -> HomerCache:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise LoadError("bad magic")
    off = len(CACHE_MAGIC)
    fields = _CACHE_HEADER.unpack_from(blob, off)
    off += _CACHE_HEADER.size
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
    length, next_grid, has_logits, pi_scale = _CACHE_META.unpack_from(blob, off)
    off += _CACHE_META.size

    def take(count: int, what: str) -> np.ndarray:
        nonlocal off
        nbytes = 4 * count
        if off + nbytes > len(blob):
            raise LoadError(f"unexpected EOF in {what}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).astype(np.float32)
        off += nbytes
        return arr

    layers = []
    for layer in range(cfg.n_layers):
        (t,) = struct.unpack_from("<I", blob, off)
        off += 4
        if t != length:
            raise LoadError(f"layer {layer} length {t} != cache length {length}")
        pos = take(t, f"layer {layer} positions")
        keys = take(t * cfg.n_heads * cfg.d_head, f"layer {layer} keys").reshape(
            t, cfg.n_heads, cfg.d_head
        )
        values = take(t * cfg.n_heads * cfg.d_head, f"layer {layer} values").reshape(
            t, cfg.n_heads, cfg.d_head
        )
        layers.append(LayerKV(layer, keys, values, pos))
    logits = take(cfg.vocab_size, "next logits") if has_logits else None
    if off != len(blob):
        raise LoadError(f"{len(blob) - off} trailing bytes in cache file")
    return HomerCache(cfg, layers, int(next_grid), float(pi_scale), logits)
