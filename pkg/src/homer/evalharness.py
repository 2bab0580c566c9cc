"""Evaluation harness: incremental perplexity, needle retention, and the
memory/speed benchmark."""

from __future__ import annotations

import io
import csv
import math
import time

import numpy as np

from .calibration import BiasTable, zero_bias
from .chunking import make_chunks, split_prompt
from .errors import ConfigError, ContractViolation
from .model import (
    LayerWeights,
    ModelConfig,
    ModelWeights,
    forward_pass,
    plain_forward,
)
from .scheduler import attach_cache, run_homer


def _nll_from_logits(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Negative log-likelihood of each target under its logits row,
    accumulated in float64."""
    logits = logits.astype(np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    picked = shifted[np.arange(targets.shape[0]), targets]
    return logz - picked


def perplexity_report(
    weights: ModelWeights,
    document: np.ndarray,
    *,
    bias: BiasTable,
    stride: int | None = None,
    initial_window: int | None = None,
    suffix_len: int = 0,
    target_len: int | None = None,
    mode: str = "dfs",
    leaf_bonus: int = 0,
    pi_scale: float | None = None,
) -> dict:
    """Incremental perplexity: the first initial_window tokens are scored by
    a plain forward; each subsequent stride is scored teacher-forced against
    the compressed cache of everything before it. Aggregate perplexity is
    exp(mean NLL) over all scored tokens.
    """
    cfg = weights.config
    document = np.asarray(document, dtype=np.int32)
    window = cfg.max_chunk if initial_window is None else initial_window
    step = math.ceil(cfg.max_chunk / 2) if stride is None else stride
    if window < 2:
        raise ConfigError("initial window must cover at least two tokens")
    if step < 1:
        raise ConfigError("stride must be positive")
    n = document.shape[0]
    if n < 2:
        raise ConfigError("document too short")

    segments = []
    total_nll = 0.0
    total_tokens = 0

    head = document[: min(window, n)]
    _, logits = plain_forward(weights, head)
    nll = _nll_from_logits(logits[:-1], head[1:])
    segments.append(
        {
            "start": 1,
            "end": int(head.shape[0]),
            "n_tokens": int(head.shape[0] - 1),
            "nll_sum": float(nll.sum()),
            "perplexity": float(np.exp(nll.mean())),
            "compressed": False,
        }
    )
    total_nll += float(nll.sum())
    total_tokens += head.shape[0] - 1

    pos = head.shape[0]
    while pos < n:
        context = document[:pos]
        s_eff = min(suffix_len, context.shape[0] - 1, cfg.max_chunk - 1)
        chunks = make_chunks(split_prompt(context, 0, s_eff), cfg, pi_scale)
        cache, report = run_homer(
            chunks,
            weights,
            bias,
            mode=mode,
            target_len=target_len,
            leaf_bonus=leaf_bonus,
            pi_scale=pi_scale if pi_scale is not None else 1.0,
        )
        upto = min(pos + step, n)
        scored = document[pos:upto]
        ctx = attach_cache(cache, weights)
        step_logits = ctx.score_tokens(scored)
        rows = np.concatenate([cache.next_logits[None, :], step_logits[:-1]])
        nll = _nll_from_logits(rows, scored)
        segments.append(
            {
                "start": int(pos),
                "end": int(upto),
                "n_tokens": int(scored.shape[0]),
                "nll_sum": float(nll.sum()),
                "perplexity": float(np.exp(nll.mean())),
                "compressed": True,
                "n_chunks": report.n_chunks,
                "peak_units": report.peak_units,
                "bound_units": report.bound_units,
            }
        )
        total_nll += float(nll.sum())
        total_tokens += scored.shape[0]
        pos = upto

    return {
        "n_scored": total_tokens,
        "aggregate_nll": total_nll / total_tokens,
        "aggregate_perplexity": float(np.exp(total_nll / total_tokens)),
        "segments": segments,
    }


# ---------------------------------------------------------------------------
# needle retention: a designed model whose final-token attention singles out
# one marker token at every layer.

NEEDLE_MARKER_TOKEN = 250


def build_needle_weights(
    *,
    n_layers: int = 4,
    max_chunk: int = 32,
    margin: float = 1.0,
    seed: int = 0,
) -> ModelWeights:
    """Weights engineered so the last token's attention logit to the marker
    token exceeds every other token's logit by at least `margin` at every
    layer.

    Construction: residual contributions are zeroed (wo = 0, w_down = 0) so
    hidden states stay equal to the embeddings at every layer. Queries and
    keys live on the highest rotary pair, whose rotation angle is negligible
    under the huge rope base, and read two reserved embedding channels: one
    shared by all tokens (query side) and one carried only by the marker
    (key side). Non-marker keys are exactly zero, so their logits are
    exactly zero while the marker's stays large and positive.
    """
    d_model = 16
    cfg = ModelConfig(
        n_layers=n_layers,
        n_heads=1,
        d_model=d_model,
        d_head=d_model,
        vocab_size=258,
        rope_base=1e9,
        max_chunk=max_chunk,
    )
    rng = np.random.default_rng(seed)
    emb = np.zeros((cfg.vocab_size, d_model), dtype=np.float32)
    emb[:, 0] = 1.0
    emb[:, 2:14] = rng.standard_normal((cfg.vocab_size, 12), dtype=np.float32) * np.float32(0.01)
    emb[NEEDLE_MARKER_TOKEN, 1] = 4.0

    signal_dim = d_model - 2  # highest rotary pair: angle ~ position * 1e-7
    wq = np.zeros((d_model, d_model), dtype=np.float32)
    wk = np.zeros((d_model, d_model), dtype=np.float32)
    wq[0, signal_dim] = 2.0
    wk[1, signal_dim] = 2.0

    def layer() -> LayerWeights:
        return LayerWeights(
            wq=wq.copy(),
            wk=wk.copy(),
            wv=np.float32(0.05) * np.eye(d_model, dtype=np.float32),
            wo=np.zeros((d_model, d_model), dtype=np.float32),
            w_gate=rng.standard_normal((d_model, cfg.d_ff), dtype=np.float32) * np.float32(0.01),
            w_up=rng.standard_normal((d_model, cfg.d_ff), dtype=np.float32) * np.float32(0.01),
            w_down=np.zeros((cfg.d_ff, d_model), dtype=np.float32),
            attn_norm=np.ones(d_model, dtype=np.float32),
            mlp_norm=np.ones(d_model, dtype=np.float32),
        )

    weights = ModelWeights(
        config=cfg,
        tok_embedding=emb,
        layers=[layer() for _ in range(n_layers)],
        final_norm=np.ones(d_model, dtype=np.float32),
        head=rng.standard_normal((d_model, cfg.vocab_size), dtype=np.float32) * np.float32(0.01),
    )
    _verify_needle_margin(weights, margin)
    return weights


def _verify_needle_margin(weights: ModelWeights, margin: float) -> None:
    cfg = weights.config
    rng = np.random.default_rng(123)
    tokens = rng.integers(0, 250, size=cfg.max_chunk, dtype=np.int64).astype(np.int32)
    marker_at = cfg.max_chunk // 2
    tokens[marker_at] = NEEDLE_MARKER_TOKEN
    result = forward_pass(weights, tokens)
    for record in result.records:
        logit = record.head_mean()
        others = np.delete(logit, marker_at)
        gap = float(logit[marker_at] - others.max())
        if gap < margin:
            raise ContractViolation(
                f"designed margin {gap:.3f} below required {margin} at layer {record.layer_index}"
            )


def needle_report(
    trials: int,
    seed: int,
    *,
    weights: ModelWeights | None = None,
    n_chunks: int = 8,
    prefix_len: int = 2,
    suffix_len: int = 2,
    target_len: int | None = None,
) -> dict:
    """Plant a marker token at a random context position per trial and
    report the fraction of trials whose marker provenance id survives into
    the cache: once with real significance scores, once with scores zeroed
    (positional tie-break only)."""
    weights = weights or build_needle_weights()
    cfg = weights.config
    bias = zero_bias(cfg)
    cap = cfg.max_chunk - prefix_len - suffix_len
    n_ctx = cap * n_chunks
    rng = np.random.default_rng(seed)

    survived = {"attention": 0, "zero": 0}
    placements = []
    for _ in range(trials):
        filler = rng.integers(0, 250, size=n_ctx, dtype=np.int64).astype(np.int32)
        marker_pos = int(rng.integers(0, n_ctx))
        placements.append(marker_pos)
        filler[marker_pos] = NEEDLE_MARKER_TOKEN
        prefix = np.full(prefix_len, 65, dtype=np.int32)
        suffix = np.full(suffix_len, 63, dtype=np.int32)
        tokens = np.concatenate([prefix, filler, suffix])
        split = split_prompt(tokens, prefix_len, suffix_len)
        chunks = make_chunks(split, cfg)
        marker_prov = prefix_len + suffix_len + marker_pos
        for score_mode in ("attention", "zero"):
            cache, _ = run_homer(
                chunks,
                weights,
                bias,
                target_len=target_len,
                score_mode=score_mode,
            )
            prov = cache.layers[0].provenance
            if prov is not None and marker_prov in prov:
                survived[score_mode] += 1

    return {
        "trials": trials,
        "seed": seed,
        "n_chunks": n_chunks,
        "context_tokens": n_ctx,
        "survived": survived["attention"],
        "survival_fraction": survived["attention"] / trials,
        "control_survived": survived["zero"],
        "control_fraction": survived["zero"] / trials,
        "placements": placements,
    }


# ---------------------------------------------------------------------------
# memory/speed benchmark

BENCH_COLUMNS = ("length", "mode", "peak_units", "bound_units", "wall_ms", "tokens_final")


def bench_rows(
    weights: ModelWeights,
    lengths: list[int],
    modes: list[str],
    *,
    seed: int = 0,
    leaf_bonus: int = 0,
    target_len: int | None = None,
) -> list[dict]:
    """Compress seeded random inputs of the given lengths in each mode and
    record ledger peaks against the analytic bound, plus wall time."""
    cfg = weights.config
    bias = zero_bias(cfg)
    rows = []
    for length in lengths:
        rng = np.random.default_rng(seed)
        tokens = rng.integers(0, 256, size=length, dtype=np.int64).astype(np.int32)
        chunks = make_chunks(split_prompt(tokens, 0, 0), cfg)
        for mode in modes:
            t0 = time.perf_counter()
            cache, report = run_homer(
                chunks,
                weights,
                bias,
                mode=mode,
                target_len=target_len,
                leaf_bonus=leaf_bonus,
            )
            wall_ms = (time.perf_counter() - t0) * 1000.0
            rows.append(
                {
                    "length": length,
                    "mode": mode,
                    "peak_units": report.peak_units,
                    "bound_units": report.bound_units,
                    "wall_ms": round(wall_ms, 3),
                    "tokens_final": cache.length,
                }
            )
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()
