"""Calibrated significance scoring and token pruning.

Significance of token i is its head-averaged attention logit from the final
token minus the calibrated bias logit at its distance from that token. Affix
tokens get +inf and are never pruned. Pruning drops the k lowest-scoring
tokens; ties break toward pruning the later position, which makes repeated
pruning with frozen scores compose exactly.
"""

from __future__ import annotations

import numpy as np

from .calibration import BiasTable
from .errors import ContractViolation
from .model import AttentionRecord, LayerKV
from .state import ChunkState


def significance_scores(
    record: AttentionRecord,
    positions_from_end: np.ndarray,
    bias: BiasTable,
    layer: int,
    affix_mask: np.ndarray,
) -> np.ndarray:
    """Per-token scores: attention logit minus bias at the token's distance;
    +inf for affix tokens."""
    base = record.head_mean()
    if base.shape[0] != affix_mask.shape[0]:
        raise ContractViolation("attention record and affix mask lengths differ")
    scores = base - bias.lookup_many(layer, positions_from_end)
    return np.where(affix_mask, np.float32(np.inf), scores).astype(np.float32)


def select_pruned(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k lowest-scoring tokens, later positions pruned first
    on ties. Returned sorted ascending."""
    n = scores.shape[0]
    # lexsort: last key is primary. Secondary key -index => later index first.
    order = np.lexsort((-np.arange(n), scores))
    return np.sort(order[:k])


def prune(state: ChunkState, k: int, scores: np.ndarray) -> ChunkState:
    """Drop the k least significant tokens from the state.

    Hidden states, positions, provenance and masks shrink consistently, as
    does the kv of the most recently archived layer (the layer the scores
    were computed from); earlier layers are left for propagative refinement.
    The pruned provenance ids are recorded on the returned state.
    """
    n = len(state)
    if scores.shape[0] != n:
        raise ContractViolation("scores length does not match state")
    n_affix = int(state.affix_mask.sum())
    if k > n - n_affix:
        raise ContractViolation(f"cannot prune {k} of {n - n_affix} non-affix tokens")
    if k < 0:
        raise ContractViolation("k must be non-negative")

    pruned_idx = select_pruned(scores, k)
    if state.affix_mask[pruned_idx].any():
        raise ContractViolation("pruning selected an affix token")
    keep = np.ones(n, dtype=bool)
    keep[pruned_idx] = False

    archived = list(state.archived)
    if archived and k:
        top = archived[-1]
        if len(top) != n:
            raise ContractViolation("top archived layer out of sync with state")
        archived[-1] = LayerKV(
            top.layer_index,
            top.keys[keep],
            top.values[keep],
            top.position_ids[keep],
            None if top.provenance is None else top.provenance[keep],
        )
    return ChunkState(
        hidden=state.hidden[keep],
        position_ids=state.position_ids[keep],
        affix_mask=state.affix_mask[keep],
        provenance=state.provenance[keep],
        p=state.p,
        s=state.s,
        archived=archived,
        span=state.span,
        pruned_provenance=state.provenance[pruned_idx],
        top_hidden=state.top_hidden,
    )
