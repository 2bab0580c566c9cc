"""Merge tree construction, layer scheduling, and chunk-state merging.

Chunks are leaves of a binary tree; adjacent nodes pair left-to-right at
each level and an odd leftover passes through as a "bye". Transformer
layers are assigned per tree level: an equal split plus an optional extra
allocation to the leaf level, remainder going to the deepest levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation
from .model import LayerKV
from .state import ChunkState, MemoryLedger


@dataclass
class MergeNode:
    level: int
    span: tuple[int, int]  # inclusive leaf-index range, document order
    leaf_index: int | None = None
    left: "MergeNode | None" = None
    right: "MergeNode | None" = None

    @property
    def kind(self) -> str:
        if self.leaf_index is not None:
            return "leaf"
        return "bye" if self.right is None else "merge"


@dataclass
class MergeTree:
    root: MergeNode
    n_leaves: int
    height: int
    levels: list[list[MergeNode]] = field(default_factory=list)


def build_tree(n_chunks: int) -> MergeTree:
    """Left-to-right pairing per level; odd leftover nodes bye upward.
    Height is ceil(log2 n_chunks)."""
    if n_chunks < 1:
        raise ConfigError("need at least one chunk")
    current = [MergeNode(level=0, span=(i, i), leaf_index=i) for i in range(n_chunks)]
    levels = [list(current)]
    level = 0
    while len(current) > 1:
        level += 1
        nxt = []
        for i in range(0, len(current) - 1, 2):
            a, b = current[i], current[i + 1]
            nxt.append(MergeNode(level=level, span=(a.span[0], b.span[1]), left=a, right=b))
        if len(current) % 2:
            tail = current[-1]
            nxt.append(MergeNode(level=level, span=tail.span, left=tail))
        current = nxt
        levels.append(list(current))
    root = current[0]
    assert root.level == (0 if n_chunks == 1 else math.ceil(math.log2(n_chunks)))
    return MergeTree(root=root, n_leaves=n_chunks, height=root.level, levels=levels)


@dataclass
class LevelSchedule:
    """Layer counts per tree level; L[0] is the leaf level."""

    layers_per_level: list[int]
    leaf_bonus: int = 0

    @property
    def n_layers(self) -> int:
        return sum(self.layers_per_level)

    @property
    def height(self) -> int:
        return len(self.layers_per_level) - 1

    def start(self, level: int) -> int:
        """First global layer index of the given level's window."""
        return sum(self.layers_per_level[:level])

    def window(self, level: int) -> range:
        lo = self.start(level)
        return range(lo, lo + self.layers_per_level[level])


def build_schedule(n_layers: int, h: int, leaf_bonus: int = 0) -> LevelSchedule:
    """Equal split of layers over h+1 levels; remainder to the deepest
    (leaf-side) levels; leaf_bonus extra layers on top of L[0]."""
    if leaf_bonus < 0:
        raise ConfigError("leaf_bonus must be non-negative")
    if n_layers < (h + 1) + leaf_bonus:
        raise ConfigError(
            f"{n_layers} layers cannot cover {h + 1} levels with leaf bonus {leaf_bonus}"
        )
    base, rem = divmod(n_layers - leaf_bonus, h + 1)
    layers = [base + (1 if i < rem else 0) for i in range(h + 1)]
    layers[0] += leaf_bonus
    return LevelSchedule(layers, leaf_bonus)


def merge_states(
    left: ChunkState,
    right: ChunkState,
    ledger: MemoryLedger | None = None,
    max_len: int | None = None,
) -> ChunkState:
    """Concatenate two reduced chunk states into one.

    Output token order: prefix, left context, right context, suffix. The
    duplicated prefix/suffix hidden states are replaced by the element-wise
    mean of the two copies; archived lower-layer kv keeps the left child's
    affix copies and splices the right child's context rows in document
    order, releasing the dropped duplicates from the ledger.
    """
    p, s = left.p, left.s
    if (p, s) != (right.p, right.s):
        raise ContractViolation("children carry different affix sizes")
    if left.depth != right.depth:
        raise ContractViolation(
            f"children at different depths ({left.depth} vs {right.depth})"
        )
    nl, nr = len(left), len(right)
    if max_len is not None and nl + nr - p - s > max_len:
        raise ContractViolation(
            f"merged chunk of {nl + nr - p - s} tokens exceeds the {max_len}-token limit"
        )
    if p or s:
        if not np.array_equal(left.position_ids[:p], right.position_ids[:p]) or not np.array_equal(
            left.position_ids[nl - s :], right.position_ids[nr - s :]
        ):
            raise ContractViolation("affix position ids differ between children")
        if not np.array_equal(left.provenance[:p], right.provenance[:p]) or not np.array_equal(
            left.provenance[nl - s :], right.provenance[nr - s :]
        ):
            raise ContractViolation("affix provenance ids differ between children")

    half = np.float32(0.5)
    hidden = np.concatenate(
        [
            (left.hidden[:p] + right.hidden[:p]) * half,
            left.hidden[p : nl - s],
            right.hidden[p : nr - s],
            (left.hidden[nl - s :] + right.hidden[nr - s :]) * half,
        ]
    )
    position_ids = np.concatenate(
        [
            left.position_ids[:p],
            left.position_ids[p : nl - s],
            right.position_ids[p : nr - s],
            left.position_ids[nl - s :],
        ]
    )
    provenance = np.concatenate(
        [
            left.provenance[:p],
            left.provenance[p : nl - s],
            right.provenance[p : nr - s],
            left.provenance[nl - s :],
        ]
    )
    n = hidden.shape[0]
    affix_mask = np.zeros(n, dtype=bool)
    affix_mask[:p] = True
    if s:
        affix_mask[n - s :] = True

    archived: list[LayerKV] = []
    for lkv, rkv in zip(left.archived, right.archived):
        if lkv.layer_index != rkv.layer_index:
            raise ContractViolation("archived layers out of order between children")
        ln = len(lkv)
        rn = len(rkv)

        def splice(l_arr, r_arr):
            return np.concatenate(
                [l_arr[: ln - s], r_arr[p : rn - s], l_arr[ln - s :]]
                if s
                else [l_arr, r_arr[p:]]
            )

        archived.append(
            LayerKV(
                lkv.layer_index,
                splice(lkv.keys, rkv.keys),
                splice(lkv.values, rkv.values),
                splice(lkv.position_ids, rkv.position_ids),
                None
                if lkv.provenance is None
                else splice(lkv.provenance, rkv.provenance),
            )
        )
        if ledger is not None:
            ledger.release(p + s)  # right child's duplicated affix rows

    return ChunkState(
        hidden=hidden,
        position_ids=position_ids,
        affix_mask=affix_mask,
        provenance=provenance,
        p=p,
        s=s,
        archived=archived,
        span=(left.span[0], right.span[1]),
    )
