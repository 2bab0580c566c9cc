"""Hierarchical merging execution, memory accounting, and generation.

Two computation orders over the same dataflow:

* dfs: strictly sequential depth-first traversal (left child, right child,
  merge, forward, reduce). This is the memory-efficient order whose ledger
  peak stays within (h/2 + 1) * L * C * M units for a tree of height h.
* parallel: level-order with a barrier per level, modelling the direct
  implementation in which every node of a level is in flight before any
  reduction happens. All forwards of a level charge the ledger before any
  of its prune/refine releases.

Both orders produce bit-identical caches; only the ledger trajectory
differs.

Ledger accounting: each layer forward charges one unit per input token (the
kv created at that layer); pruning releases the pruned tokens' entries at
the scoring layer; propagative refinement releases the remainder from all
archived layers; merging releases the right child's duplicated affix rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .calibration import BiasTable
from .chunking import Chunk
from .errors import ConfigError, ContractViolation
from .merging import LevelSchedule, MergeNode, MergeTree, build_schedule, build_tree, merge_states
from .model import LayerKV, ModelWeights, embed_tokens, layer_forward, output_logits
from .pruning import prune, significance_scores
from .state import ChunkState, HomerCache, MemoryLedger

SCORE_MODES = ("attention", "zero")


@dataclass
class LedgerReport:
    mode: str
    n_chunks: int
    height: int
    peak_units: int
    bound_units: int
    final_units: int
    per_node_trace: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_chunks": self.n_chunks,
            "height": self.height,
            "peak_units": self.peak_units,
            "bound_units": self.bound_units,
            "final_units": self.final_units,
            "per_node_trace": self.per_node_trace,
        }


@dataclass
class RunContext:
    chunks: list[Chunk]
    weights: ModelWeights
    schedule: LevelSchedule
    bias: BiasTable
    ledger: MemoryLedger
    target: int | None  # None disables pruning
    score_mode: str
    trace: list[dict]

    def trace_event(self, node_name: str, level: int, kind: str, tokens: int) -> None:
        self.trace.append(
            {
                "order": len(self.trace),
                "node": node_name,
                "level": level,
                "kind": kind,
                "tokens": tokens,
                "live": self.ledger.live,
                "peak": self.ledger.peak,
            }
        )


def _span_name(span: tuple[int, int]) -> str:
    lo, hi = span
    return f"{lo}" if lo == hi else f"{lo}-{hi}"


def _affix_counts(mask: np.ndarray) -> tuple[int, int]:
    n = mask.shape[0]
    if mask.all():
        return n, 0
    p = int(np.argmax(~mask))
    s = int(np.argmax(~mask[::-1]))
    return p, s


def _embed_chunk(chunk: Chunk, weights: ModelWeights, leaf_index: int) -> ChunkState:
    p, s = _affix_counts(chunk.affix_mask)
    return ChunkState(
        hidden=embed_tokens(weights, chunk.tokens),
        position_ids=chunk.position_ids.astype(np.float32).copy(),
        affix_mask=chunk.affix_mask.copy(),
        provenance=chunk.provenance.copy(),
        p=p,
        s=s,
        span=(leaf_index, leaf_index),
    )


def _forward_window(state: ChunkState, window: range, rt: RunContext):
    """Forward the state through a contiguous layer window, archiving the
    kv of each layer and charging the ledger per created entry."""
    record = None
    for layer in window:
        if layer != state.depth:
            raise ContractViolation(
                f"layer {layer} requested but state is at depth {state.depth}"
            )
        state.hidden, kv, record = layer_forward(
            rt.weights, layer, state.hidden, state.position_ids
        )
        kv.provenance = state.provenance.copy()
        state.archived.append(kv)
        rt.ledger.charge(len(state))
    return record


def propagative_refine(
    state: ChunkState, survivors: np.ndarray, ledger: MemoryLedger | None = None
) -> ChunkState:
    """Filter every archived layer to exactly the surviving provenance ids,
    preserving order; released entries are debited from the ledger."""
    survivors = np.asarray(survivors, dtype=np.int64)
    survivor_set = set(int(x) for x in survivors)
    if len(survivor_set) != survivors.shape[0]:
        raise ContractViolation("survivor ids must be unique")
    if state.archived:
        top = state.archived[-1]
        if top.provenance is None or not survivor_set.issubset(
            int(x) for x in top.provenance
        ):
            raise ContractViolation("survivors not a subset of the top layer's tokens")
    refined: list[LayerKV] = []
    for kv in state.archived:
        if kv.provenance is None:
            raise ContractViolation("archived layer lacks provenance ids")
        keep = np.isin(kv.provenance, survivors)
        kept = int(keep.sum())
        if kept != survivors.shape[0]:
            raise ContractViolation(
                f"layer {kv.layer_index} is missing a surviving token"
            )
        refined.append(
            LayerKV(
                kv.layer_index,
                kv.keys[keep],
                kv.values[keep],
                kv.position_ids[keep],
                kv.provenance[keep],
            )
        )
        if ledger is not None:
            ledger.release(len(kv) - kept)
    return ChunkState(
        hidden=state.hidden,
        position_ids=state.position_ids,
        affix_mask=state.affix_mask,
        provenance=state.provenance,
        p=state.p,
        s=state.s,
        archived=refined,
        span=state.span,
        pruned_provenance=state.pruned_provenance,
        top_hidden=state.top_hidden,
    )


def _reduce(state: ChunkState, record, rt: RunContext) -> ChunkState:
    """End-of-node reduction: prune down to the target using the last
    layer's attention record, then propagate the decision to all archived
    layers. The final token's hidden state is captured first, pre-pruning,
    to seed generation."""
    state.top_hidden = state.hidden.copy()
    k = 0 if rt.target is None else max(0, len(state) - rt.target)
    if k:
        n = len(state)
        if rt.score_mode == "zero":
            scores = np.where(
                state.affix_mask, np.float32(np.inf), np.float32(0.0)
            ).astype(np.float32)
        else:
            distances = (n - 1) - np.arange(n, dtype=np.int64)
            scores = significance_scores(
                record, distances, rt.bias, record.layer_index, state.affix_mask
            )
        state = prune(state, k, scores)
        rt.ledger.release(k)  # the scoring layer's entries for pruned tokens
    return propagative_refine(state, state.provenance, rt.ledger)


def _finish_node(node: MergeNode, state: ChunkState, record, rt: RunContext) -> ChunkState:
    state = _reduce(state, record, rt)
    rt.trace_event(_span_name(node.span), node.level, node.kind, len(state))
    return state


def _catch_up(state: ChunkState, to_depth: int, rt: RunContext) -> None:
    """Forward a byed chunk through the layers it skipped, solo, so both
    merge children sit at the same depth. Already at target length, so no
    pruning is needed."""
    if state.depth > to_depth:
        raise ContractViolation("state deeper than requested catch-up depth")
    if state.depth == to_depth:
        return
    window = range(state.depth, to_depth)
    _forward_window(state, window, rt)
    rt.trace_event(_span_name(state.span), -1, "catchup", len(state))


def process_node(node: MergeNode, rt: RunContext) -> ChunkState:
    """Depth-first execution of one tree node: leaves
    forward through the leaf window then reduce; internal nodes process
    both children sequentially, merge, forward their level's window, and
    reduce. Bye nodes pass their child through untouched."""
    if node.kind == "leaf":
        state = _embed_chunk(rt.chunks[node.leaf_index], rt.weights, node.leaf_index)
        record = _forward_window(state, rt.schedule.window(0), rt)
        return _finish_node(node, state, record, rt)
    if node.kind == "bye":
        return process_node(node.left, rt)
    left = process_node(node.left, rt)
    right = process_node(node.right, rt)
    depth_needed = rt.schedule.start(node.level)
    _catch_up(left, depth_needed, rt)
    _catch_up(right, depth_needed, rt)
    state = merge_states(left, right, rt.ledger)
    record = _forward_window(state, rt.schedule.window(node.level), rt)
    return _finish_node(node, state, record, rt)


def _run_parallel(tree: MergeTree, rt: RunContext) -> ChunkState:
    """Level-order execution with a per-level barrier: every node of the
    level is merged and forwarded (all charges) before any node of the
    level is reduced (all releases)."""
    states: dict[int, ChunkState] = {}
    pending: list[tuple[MergeNode, ChunkState, object]] = []
    for leaf in tree.levels[0]:
        state = _embed_chunk(rt.chunks[leaf.leaf_index], rt.weights, leaf.leaf_index)
        record = _forward_window(state, rt.schedule.window(0), rt)
        pending.append((leaf, state, record))
    for leaf, state, record in pending:
        states[id(leaf)] = _finish_node(leaf, state, record, rt)

    for level in range(1, tree.height + 1):
        pending = []
        byes: list[MergeNode] = []
        for node in tree.levels[level]:
            if node.kind == "bye":
                byes.append(node)
                continue
            left = states.pop(id(node.left))
            right = states.pop(id(node.right))
            depth_needed = rt.schedule.start(level)
            _catch_up(left, depth_needed, rt)
            _catch_up(right, depth_needed, rt)
            state = merge_states(left, right, rt.ledger)
            record = _forward_window(state, rt.schedule.window(level), rt)
            pending.append((node, state, record))
        for node, state, record in pending:
            states[id(node)] = _finish_node(node, state, record, rt)
        for node in byes:
            states[id(node)] = states.pop(id(node.left))
    return states[id(tree.root)]


def analytic_bound_units(
    height: int, n_layers: int, max_chunk: int, target: int | None, unit_bytes: int = 1
) -> int:
    """Peak-memory bound (h/2 + 1) * L * C * M, generalized to an arbitrary
    reduction target T as (h*T + C) * L * M; the two coincide at T = C/2."""
    t = max_chunk if target is None else target
    return (height * t + max_chunk) * n_layers * unit_bytes


def run_homer(
    chunks: list[Chunk],
    weights: ModelWeights,
    bias: BiasTable,
    *,
    mode: str = "dfs",
    target_len: int | None = None,
    leaf_bonus: int = 0,
    score_mode: str = "attention",
    pi_scale: float = 1.0,
    unit_bytes: int = 1,
    ledger: MemoryLedger | None = None,
) -> tuple[HomerCache, LedgerReport]:
    """Compress chunks into a fixed-length per-layer kv cache.

    target_len: tokens each node is reduced to before its parent merges it.
    None picks the default ceil(C/2); 0 disables pruning entirely (only
    valid for a single chunk, since merges would overflow C).
    """
    if not chunks:
        raise ConfigError("need at least one chunk")
    if mode not in ("dfs", "parallel"):
        raise ConfigError(f"unknown mode {mode!r}")
    if score_mode not in SCORE_MODES:
        raise ConfigError(f"unknown score mode {score_mode!r}")
    cfg = weights.config
    if bias.n_layers != cfg.n_layers:
        raise ConfigError("bias table layer count does not match the model")

    c = cfg.max_chunk
    p, s = _affix_counts(chunks[0].affix_mask)
    if target_len is None:
        target: int | None = math.ceil(c / 2)
    elif target_len == 0:
        target = None
    else:
        target = target_len
    if target is not None:
        if target < max(1, p + s):
            raise ConfigError(f"target length {target} cannot retain the {p + s} affix tokens")
        if len(chunks) > 1 and 2 * target - (p + s) > c:
            raise ConfigError(
                f"target length {target} would merge chunks beyond the {c}-token limit"
            )
    elif len(chunks) > 1:
        raise ConfigError("pruning disabled (target 0) requires a single chunk")

    tree = build_tree(len(chunks))
    schedule = build_schedule(cfg.n_layers, tree.height, leaf_bonus)
    if ledger is None:
        ledger = MemoryLedger(unit_bytes)
    elif ledger.live or ledger.charged:
        raise ConfigError("injected ledger must start empty")
    rt = RunContext(chunks, weights, schedule, bias, ledger, target, score_mode, [])

    root = process_node(tree.root, rt) if mode == "dfs" else _run_parallel(tree, rt)

    ledger.check_conservation()
    if root.depth != cfg.n_layers:
        raise ContractViolation("root did not traverse every layer")
    cache = HomerCache(
        config=cfg,
        layers=root.archived,
        next_grid_id=c if s > 0 else len(chunks[0]),
        pi_scale=pi_scale,
        next_logits=output_logits(rt.weights, root.top_hidden)[-1],
    )
    cache.validate()
    report = LedgerReport(
        mode=mode,
        n_chunks=len(chunks),
        height=tree.height,
        peak_units=ledger.peak,
        bound_units=analytic_bound_units(tree.height, cfg.n_layers, c, target, unit_bytes),
        final_units=ledger.live,
        per_node_trace=rt.trace,
    )
    return cache, report


# ---------------------------------------------------------------------------
# generation


class GenerationContext:
    """Autoregressive decoding against a fixed compressed cache.

    New tokens attend to the cache kv plus everything generated so far, with
    position ids continuing from the cache's next id on the (possibly
    interpolated) grid.
    """

    def __init__(self, cache: HomerCache, weights: ModelWeights):
        if cache.config.n_layers != weights.config.n_layers:
            raise ConfigError(
                f"cache has {cache.config.n_layers} layers, model has {weights.config.n_layers}"
            )
        if (cache.config.n_heads, cache.config.d_head) != (
            weights.config.n_heads,
            weights.config.d_head,
        ):
            raise ConfigError("cache/model head shapes differ")
        self.cache = cache
        self.weights = weights
        self.past = [
            LayerKV(kv.layer_index, kv.keys.copy(), kv.values.copy(), kv.position_ids.copy())
            for kv in cache.layers
        ]
        self.offset = 0

    def step(self, token: int) -> np.ndarray:
        """Feed one token; returns the next-token logits."""
        pos = np.asarray([self.cache.next_position(self.offset)], dtype=np.float32)
        hidden = embed_tokens(self.weights, np.asarray([token], dtype=np.int32))
        for layer in range(self.weights.config.n_layers):
            hidden, kv, _ = layer_forward(
                self.weights, layer, hidden, pos, past_kv=self.past[layer]
            )
            old = self.past[layer]
            self.past[layer] = LayerKV(
                layer,
                np.concatenate([old.keys, kv.keys]),
                np.concatenate([old.values, kv.values]),
                np.concatenate([old.position_ids, kv.position_ids]),
            )
        self.offset += 1
        return output_logits(self.weights, hidden)[0]

    def score_tokens(self, tokens: np.ndarray) -> np.ndarray:
        """Teacher-forced logits for a whole continuation in one causal
        forward; row i predicts the token after tokens[i]."""
        tokens = np.asarray(tokens, dtype=np.int32)
        n = tokens.shape[0]
        pos = np.asarray(
            [self.cache.next_position(self.offset + i) for i in range(n)], dtype=np.float32
        )
        hidden = embed_tokens(self.weights, tokens)
        for layer in range(self.weights.config.n_layers):
            hidden, kv, _ = layer_forward(
                self.weights, layer, hidden, pos, past_kv=self.past[layer]
            )
            old = self.past[layer]
            self.past[layer] = LayerKV(
                layer,
                np.concatenate([old.keys, kv.keys]),
                np.concatenate([old.values, kv.values]),
                np.concatenate([old.position_ids, kv.position_ids]),
            )
        self.offset += n
        return output_logits(self.weights, hidden)


def attach_cache(cache: HomerCache, weights: ModelWeights) -> GenerationContext:
    """Bind a compressed cache to model weights for decoding."""
    return GenerationContext(cache, weights)


def generate_tokens(
    cache: HomerCache,
    weights: ModelWeights,
    n_tokens: int,
    *,
    temperature: float = 0.0,
    seed: int = 0,
    bos_token: int = 256,
) -> np.ndarray:
    """Decode n_tokens from a cache. Greedy when temperature <= 0 (and then
    fully deterministic); otherwise temperature sampling seeded by `seed`.

    An empty cache (T=0, no stored logits) decodes unconditioned from BOS.
    """
    ctx = attach_cache(cache, weights)
    if cache.next_logits is not None:
        logits = cache.next_logits
    else:
        logits = ctx.step(bos_token)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_tokens):
        if temperature <= 0:
            token = int(np.argmax(logits))
        else:
            scaled = (logits / np.float32(temperature)).astype(np.float64)
            scaled -= scaled.max()
            probs = np.exp(scaled)
            probs /= probs.sum()
            token = int(rng.choice(probs.shape[0], p=probs))
        out.append(token)
        logits = ctx.step(token)
    return np.asarray(out, dtype=np.int32)
