"""Per-distance attention-bias calibration.

Attention-based pruning has a position bias: tokens near the final token
receive systematically higher attention. The calibrator estimates, per layer
and per distance from the final token, the mean pre-softmax attention logit
over a corpus of segments. Subtracting these bias logits from raw attention
logits yields the calibrated significance scores used for pruning.

Calibration is a fold over segments: per-cell float64 sums and counts,
divided once at the end, so segment order never changes the result beyond
the (order-invariant) set of contributions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation
from .model import ModelConfig, ModelWeights, forward_pass


@dataclass
class BiasTable:
    """Bias logits indexed by (layer, distance-from-final-token)."""

    values: np.ndarray  # float32 [n_layers, max_distance]
    counts: np.ndarray  # int64 [n_layers, max_distance]

    @property
    def n_layers(self) -> int:
        return self.values.shape[0]

    @property
    def max_distance(self) -> int:
        return self.values.shape[1]

    def largest_calibrated(self, layer: int) -> int:
        """Largest distance with at least one sample, or -1 if none."""
        nz = np.flatnonzero(self.counts[layer] > 0)
        return int(nz[-1]) if nz.size else -1

    def lookup(self, layer: int, distance: int) -> float:
        """Bias at (layer, distance). Distances beyond the largest calibrated
        distance clamp to it; zero-sample cells return 0."""
        top = self.largest_calibrated(layer)
        if top < 0:
            return 0.0
        d = min(int(distance), top)
        if self.counts[layer, d] == 0:
            return 0.0
        return float(self.values[layer, d])

    def lookup_many(self, layer: int, distances: np.ndarray) -> np.ndarray:
        top = self.largest_calibrated(layer)
        if top < 0:
            return np.zeros(distances.shape[0], dtype=np.float32)
        d = np.minimum(np.asarray(distances, dtype=np.int64), top)
        vals = self.values[layer, d]
        return np.where(self.counts[layer, d] > 0, vals, np.float32(0.0)).astype(np.float32)


def zero_bias(config: ModelConfig) -> BiasTable:
    """All-zero table (every cell counted once, so lookups return 0.0
    rather than falling through the clamp rule)."""
    shape = (config.n_layers, config.max_chunk)
    return BiasTable(np.zeros(shape, dtype=np.float32), np.ones(shape, dtype=np.int64))


def calibrate(
    segments: list[np.ndarray], weights: ModelWeights, config: ModelConfig | None = None
) -> BiasTable:
    """Estimate bias logits from calibration segments.

    For each segment, take the final token's head-averaged pre-softmax
    attention logits at every layer; the token at index i contributes to
    distance len-1-i. Segments shorter than d+1 contribute nothing to
    distance d.
    """
    cfg = config or weights.config
    if not segments:
        raise ConfigError("calibration requires at least one segment")
    sums = np.zeros((cfg.n_layers, cfg.max_chunk), dtype=np.float64)
    counts = np.zeros((cfg.n_layers, cfg.max_chunk), dtype=np.int64)
    for seg in segments:
        seg = np.asarray(seg, dtype=np.int32)
        if seg.shape[0] > cfg.max_chunk:
            raise ContractViolation(
                f"segment of {seg.shape[0]} tokens exceeds max chunk {cfg.max_chunk}"
            )
        result = forward_pass(weights, seg)
        for layer, record in enumerate(result.records):
            vals = record.head_mean().astype(np.float64)
            # index i sits at distance len-1-i from the final token
            sums[layer, : vals.shape[0]] += vals[::-1]
            counts[layer, : vals.shape[0]] += 1
    values = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0).astype(np.float32)
    return BiasTable(values, counts)


def lookup_bias(table: BiasTable, layer: int, distance: int) -> float:
    return table.lookup(layer, distance)


def save_bias(table: BiasTable, path) -> None:
    payload = {
        "n_layers": table.n_layers,
        "max_distance": table.max_distance,
        "values": [[float(v) for v in row] for row in table.values],
        "counts": [[int(c) for c in row] for row in table.counts],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_bias(path) -> BiasTable:
    with open(path) as fh:
        payload = json.load(fh)
    values = np.asarray(payload["values"], dtype=np.float32)
    counts = np.asarray(payload["counts"], dtype=np.int64)
    if values.shape != (payload["n_layers"], payload["max_distance"]) or values.shape != counts.shape:
        raise ConfigError("bias table shape mismatch")
    if not np.isfinite(values).all():
        raise ConfigError("bias table contains non-finite values")
    return BiasTable(values, counts)


def synthetic_corpus(
    n_segments: int, config: ModelConfig, seed: int = 0, min_len: int = 8
) -> list[np.ndarray]:
    """Seeded random byte segments with lengths in [min_len, max_chunk]."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_segments):
        length = int(rng.integers(min_len, config.max_chunk + 1))
        out.append(rng.integers(0, 256, size=length, dtype=np.int64).astype(np.int32))
    return out
