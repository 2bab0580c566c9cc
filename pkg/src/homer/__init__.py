"""Hierarchical context merging for a toy decoder-only transformer.

Training-free long-context compression: a long prompt is chunked, the
chunks are forwarded and progressively merged up a binary tree with
attention-based token pruning before every merge, and the result is a
fixed-length per-layer kv cache usable for generation. An explicit memory
ledger accounts every retained kv entry and verifies the logarithmic
peak-memory behaviour of the depth-first execution order.
"""

__version__ = "0.1.0"

from .calibration import (
    BiasTable,
    calibrate,
    load_bias,
    lookup_bias,
    save_bias,
    synthetic_corpus,
    zero_bias,
)
from .chunking import Chunk, PromptSplit, assign_positions, encode_bytes, decode_bytes, make_chunks, split_prompt
from .errors import ConfigError, ContractViolation, HomerError, LoadError
from .merging import LevelSchedule, MergeNode, MergeTree, build_schedule, build_tree, merge_states
from .model import (
    AttentionRecord,
    LayerKV,
    ModelConfig,
    ModelWeights,
    layer_forward,
    load_weights,
    plain_forward,
    random_weights,
    rope_apply,
    save_weights,
)
from .pruning import prune, significance_scores
from .scheduler import (
    GenerationContext,
    LedgerReport,
    analytic_bound_units,
    attach_cache,
    generate_tokens,
    process_node,
    propagative_refine,
    RunContext,
    run_homer,
)
from .state import ChunkState, HomerCache, MemoryLedger, load_cache, save_cache

__all__ = [
    "AttentionRecord",
    "BiasTable",
    "Chunk",
    "ChunkState",
    "ConfigError",
    "ContractViolation",
    "GenerationContext",
    "HomerCache",
    "HomerError",
    "LayerKV",
    "LedgerReport",
    "LevelSchedule",
    "LoadError",
    "MemoryLedger",
    "MergeNode",
    "MergeTree",
    "ModelConfig",
    "ModelWeights",
    "PromptSplit",
    "RunContext",
    "analytic_bound_units",
    "assign_positions",
    "attach_cache",
    "build_schedule",
    "build_tree",
    "calibrate",
    "decode_bytes",
    "encode_bytes",
    "generate_tokens",
    "layer_forward",
    "load_bias",
    "load_cache",
    "load_weights",
    "lookup_bias",
    "make_chunks",
    "merge_states",
    "plain_forward",
    "process_node",
    "propagative_refine",
    "prune",
    "random_weights",
    "rope_apply",
    "run_homer",
    "save_bias",
    "save_cache",
    "save_weights",
    "significance_scores",
    "split_prompt",
    "synthetic_corpus",
    "zero_bias",
]
