"""Prompt splitting and chunk construction.

A long prompt is split into prefix / context / suffix. The context is sliced
into consecutive chunks; every chunk carries the shared prefix and suffix
(the affixes) so each attention unit sees the instruction and the ending.
Position ids are reused across chunks: the prefix occupies 0..p-1, the
context slice p.., and the suffix is anchored at C-s..C-1 so corresponding
affix tokens share ids in every chunk regardless of slice length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation
from .model import ModelConfig

BOS_TOKEN = 256
EOS_TOKEN = 257
BYTE_VOCAB_SIZE = 258


def encode_bytes(data: bytes | str) -> np.ndarray:
    """Byte-level tokenization: one token per byte."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int32)


def decode_bytes(tokens: np.ndarray) -> bytes:
    toks = np.asarray(tokens)
    return bytes(int(t) for t in toks if 0 <= int(t) < 256)


@dataclass
class PromptSplit:
    prefix: np.ndarray
    context: np.ndarray
    suffix: np.ndarray


@dataclass
class Chunk:
    """One attention unit: tokens, reused position ids, affix flags and
    globally unique provenance ids (affix tokens share ids across chunks)."""

    tokens: np.ndarray  # int32 [n]
    position_ids: np.ndarray  # float32 [n]
    affix_mask: np.ndarray  # bool [n]
    provenance: np.ndarray  # int64 [n]

    def __len__(self) -> int:
        return self.tokens.shape[0]


def split_prompt(tokens: np.ndarray, p: int, s: int) -> PromptSplit:
    tokens = np.asarray(tokens, dtype=np.int32)
    n = tokens.shape[0]
    if p < 0 or s < 0:
        raise ConfigError("affix lengths must be non-negative")
    if p + s > n:
        raise ConfigError("affixes exceed input")
    return PromptSplit(
        prefix=tokens[:p].copy(),
        context=tokens[p : n - s].copy(),
        suffix=tokens[n - s :].copy(),
    )


def assign_positions(
    chunk: Chunk, p: int, s: int, chunk_size: int, pi_scale: float | None = None
) -> Chunk:
    """Fill position ids: prefix 0..p-1, slice p.., suffix anchored at
    chunk_size-s. With pi_scale, all ids are divided by it (position
    interpolation), producing real-valued ids for RoPE."""
    n = len(chunk)
    if n > chunk_size:
        raise ContractViolation(f"chunk of {n} tokens exceeds chunk size {chunk_size}")
    grid = np.empty(n, dtype=np.float32)
    grid[:p] = np.arange(p, dtype=np.float32)
    grid[p : n - s] = p + np.arange(n - s - p, dtype=np.float32)
    if s:
        grid[n - s :] = chunk_size - s + np.arange(s, dtype=np.float32)
    if pi_scale is not None:
        if pi_scale <= 0:
            raise ConfigError("pi_scale must be positive")
        grid = grid / np.float32(pi_scale)
    return Chunk(chunk.tokens, grid, chunk.affix_mask, chunk.provenance)


def make_chunks(
    split: PromptSplit, config: ModelConfig, pi_scale: float | None = None
) -> list[Chunk]:
    """Slice the context into uniform chunks, each wrapped with the affixes.

    All chunks except possibly the last have length exactly C; the last is
    processed as-is, unpadded. Provenance ids: prefix 0..p-1 and suffix
    p..p+s-1 (shared across chunks), context token i gets p+s+i.
    """
    p, s = split.prefix.shape[0], split.suffix.shape[0]
    c = config.max_chunk
    if p + s >= c:
        raise ConfigError("affixes leave no context capacity")
    cap = c - p - s
    n_ctx = split.context.shape[0]
    n_chunks = max(1, math.ceil(n_ctx / cap))

    prefix_prov = np.arange(p, dtype=np.int64)
    suffix_prov = p + np.arange(s, dtype=np.int64)
    chunks = []
    for i in range(n_chunks):
        lo, hi = i * cap, min((i + 1) * cap, n_ctx)
        tokens = np.concatenate([split.prefix, split.context[lo:hi], split.suffix]).astype(np.int32)
        n = tokens.shape[0]
        mask = np.zeros(n, dtype=bool)
        mask[:p] = True
        if s:
            mask[n - s :] = True
        prov = np.concatenate(
            [prefix_prov, p + s + np.arange(lo, hi, dtype=np.int64), suffix_prov]
        )
        chunk = Chunk(tokens, np.empty(0, dtype=np.float32), mask, prov)
        chunks.append(assign_positions(chunk, p, s, c, pi_scale))
    return chunks
