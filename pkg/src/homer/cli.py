"""Command-line surface.

Subcommands: gen-weights, calibrate, compress, generate, perplexity,
needle, bench. All randomness flows from a single --seed flag (default 0);
every command with fixed inputs and seed writes byte-identical artifacts,
timing fields aside. Errors exit nonzero with a one-line diagnostic on
stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import calibrate, load_bias, save_bias, synthetic_corpus, zero_bias
from .chunking import decode_bytes, encode_bytes, make_chunks, split_prompt
from .errors import ConfigError, HomerError
from .evalharness import bench_rows, needle_report, perplexity_report, rows_to_csv
from .model import ACTIVATIONS, ModelConfig, load_weights, random_weights, save_weights
from .scheduler import generate_tokens, run_homer
from .state import load_cache, save_cache


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--weights", type=Path, help="weight file path")
    p.add_argument("--bias", type=Path, help="calibrated bias table (JSON)")
    p.add_argument("--zero-bias", action="store_true", help="use an all-zero bias table")
    p.add_argument("--chunk-size", type=int, help="override the model's max chunk length C")
    p.add_argument(
        "--target-len",
        type=int,
        help="per-node reduction target T (default ceil(C/2); 0 disables pruning)",
    )
    p.add_argument("--prefix-len", type=int, default=0, help="prefix affix length in tokens")
    p.add_argument("--suffix-len", type=int, default=0, help="suffix affix length in tokens")
    p.add_argument("--prefix-file", type=Path, help="file whose bytes form the prefix affix")
    p.add_argument("--suffix-file", type=Path, help="file whose bytes form the suffix affix")
    p.add_argument("--leaf-bonus", type=int, default=0, help="extra layers for the leaf level")
    p.add_argument("--mode", choices=("dfs", "parallel"), default="dfs")
    p.add_argument("--pi-scale", type=float, help="position-interpolation divisor for ids")
    p.add_argument("--seed", type=int, default=0, help="64-bit seed for all randomness")


def _load_model(args) -> object:
    if not args.weights:
        raise ConfigError("--weights is required")
    weights = load_weights(args.weights)
    if args.chunk_size:
        cfg = weights.config
        weights.config = ModelConfig(
            n_layers=cfg.n_layers,
            n_heads=cfg.n_heads,
            d_model=cfg.d_model,
            d_head=cfg.d_head,
            vocab_size=cfg.vocab_size,
            rope_base=cfg.rope_base,
            max_chunk=args.chunk_size,
            d_ff=cfg.d_ff,
            activation=cfg.activation,
        )
    return weights


def _load_bias_table(args, config):
    if args.zero_bias:
        return zero_bias(config)
    if not args.bias:
        raise ConfigError("no bias table; run `homer calibrate` first and pass --bias")
    return load_bias(args.bias)


def _read_tokens(path: Path | None) -> np.ndarray:
    data = sys.stdin.buffer.read() if path is None or str(path) == "-" else path.read_bytes()
    return encode_bytes(data)


def _split_input(tokens: np.ndarray, args):
    prefix = encode_bytes(args.prefix_file.read_bytes()) if args.prefix_file else None
    suffix = encode_bytes(args.suffix_file.read_bytes()) if args.suffix_file else None
    if prefix is not None or suffix is not None:
        parts = [x for x in (prefix, tokens, suffix) if x is not None]
        tokens = np.concatenate(parts)
        p = 0 if prefix is None else prefix.shape[0]
        s = 0 if suffix is None else suffix.shape[0]
    else:
        p, s = args.prefix_len, args.suffix_len
    return split_prompt(tokens, p, s)


def _cmd_gen_weights(args) -> int:
    cfg = ModelConfig(
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        d_model=args.d_model,
        d_head=args.d_model // args.n_heads,
        vocab_size=args.vocab_size,
        rope_base=args.rope_base,
        max_chunk=args.chunk_size or 64,
        d_ff=args.d_ff,
        activation=args.activation,
    )
    save_weights(random_weights(cfg, args.seed), args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_calibrate(args) -> int:
    weights = _load_model(args)
    if args.corpus:
        blob = Path(args.corpus).read_bytes()
        tokens = encode_bytes(blob)
        seg_len = weights.config.max_chunk
        segments = [
            tokens[i : i + seg_len]
            for i in range(0, max(len(tokens) - seg_len + 1, 1), seg_len)
        ][: args.segments]
        segments = [s for s in segments if s.shape[0] >= 2]
        if not segments:
            raise ConfigError("corpus too short to cut calibration segments")
    else:
        segments = synthetic_corpus(args.segments, weights.config, args.seed)
    table = calibrate(segments, weights)
    save_bias(table, args.out)
    print(f"calibrated {len(segments)} segments -> {args.out}")
    return 0


def _cmd_compress(args) -> int:
    weights = _load_model(args)
    bias = _load_bias_table(args, weights.config)
    tokens = _read_tokens(args.input)
    split = _split_input(tokens, args)
    chunks = make_chunks(split, weights.config, args.pi_scale)
    cache, report = run_homer(
        chunks,
        weights,
        bias,
        mode=args.mode,
        target_len=args.target_len,
        leaf_bonus=args.leaf_bonus,
        pi_scale=args.pi_scale if args.pi_scale else 1.0,
    )
    save_cache(cache, args.out)
    report_path = args.report or Path(str(args.out) + ".report.json")
    report_path.write_text(json.dumps(report.to_dict(), sort_keys=True) + "\n")
    print(
        f"compressed {tokens.shape[0]} tokens -> {cache.length} per layer "
        f"(peak {report.peak_units} <= bound {report.bound_units} units); "
        f"cache {args.out}, report {report_path}"
    )
    return 0


def _cmd_generate(args) -> int:
    weights = _load_model(args)
    cache = load_cache(args.cache)
    tokens = generate_tokens(
        cache,
        weights,
        args.n_tokens,
        temperature=args.temperature,
        seed=args.seed,
    )
    if args.ids:
        print(" ".join(str(int(t)) for t in tokens))
    else:
        sys.stdout.buffer.write(decode_bytes(tokens))
        sys.stdout.buffer.write(b"\n")
    return 0


def _cmd_perplexity(args) -> int:
    weights = _load_model(args)
    bias = _load_bias_table(args, weights.config)
    document = _read_tokens(args.input)
    report = perplexity_report(
        weights,
        document,
        bias=bias,
        stride=args.stride,
        initial_window=args.initial_window,
        suffix_len=args.suffix_len,
        target_len=args.target_len,
        mode=args.mode,
        leaf_bonus=args.leaf_bonus,
        pi_scale=args.pi_scale,
    )
    if args.report:
        args.report.write_text(json.dumps(report, sort_keys=True) + "\n")
    print(f"perplexity {report['aggregate_perplexity']:.4f} over {report['n_scored']} tokens")
    return 0


def _cmd_needle(args) -> int:
    report = needle_report(args.trials, args.seed, target_len=args.target_len)
    if args.report:
        args.report.write_text(json.dumps(report, sort_keys=True) + "\n")
    print(
        f"retention {report['survived']}/{report['trials']} "
        f"(control {report['control_survived']}/{report['trials']})"
    )
    return 0


def _cmd_bench(args) -> int:
    weights = _load_model(args)
    lengths = [int(x) for x in args.lengths.split(",") if x]
    modes = [x.strip() for x in args.modes.split(",") if x.strip()]
    rows = bench_rows(
        weights,
        lengths,
        modes,
        seed=args.seed,
        leaf_bonus=args.leaf_bonus,
        target_len=args.target_len,
    )
    csv_text = rows_to_csv(rows)
    if args.out:
        args.out.write_text(csv_text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(csv_text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="homer",
        description="Hierarchical context merging for a toy decoder-only transformer",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-weights", help="write seeded random weights")
    _common_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-layers", type=int, default=8)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--d-ff", type=int, default=0)
    p.add_argument("--vocab-size", type=int, default=258)
    p.add_argument("--rope-base", type=float, default=10000.0)
    p.add_argument("--activation", choices=ACTIVATIONS, default="silu")
    p.set_defaults(func=_cmd_gen_weights)

    p = sub.add_parser("calibrate", help="estimate per-distance bias logits")
    _common_flags(p)
    p.add_argument("--corpus", type=Path, help="text corpus; omit for a seeded synthetic one")
    p.add_argument("--segments", type=int, default=100)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("compress", help="compress a long input into a kv cache file")
    _common_flags(p)
    p.add_argument("--input", type=Path, help="input file ('-' or omit for stdin)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--report", type=Path, help="ledger report path (default <out>.report.json)")
    p.set_defaults(func=_cmd_compress)

    p = sub.add_parser("generate", help="decode tokens from a cache file")
    _common_flags(p)
    p.add_argument("--cache", type=Path, required=True)
    p.add_argument("--n-tokens", type=int, default=32)
    p.add_argument("--temperature", type=float, default=0.0, help="0 = greedy")
    p.add_argument("--ids", action="store_true", help="print token ids instead of bytes")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("perplexity", help="incremental perplexity over a document")
    _common_flags(p)
    p.add_argument("--input", type=Path, help="document ('-' or omit for stdin)")
    p.add_argument("--stride", type=int, help="tokens scored per compressed step (default C/2)")
    p.add_argument("--initial-window", type=int, help="plain-forward prefix (default C)")
    p.add_argument("--report", type=Path, help="JSON report path")
    p.set_defaults(func=_cmd_perplexity)

    p = sub.add_parser("needle", help="marker-retention test on a designed model")
    _common_flags(p)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--report", type=Path, help="JSON report path")
    p.set_defaults(func=_cmd_needle)

    p = sub.add_parser("bench", help="peak-units and wall-time benchmark CSV")
    _common_flags(p)
    p.add_argument("--lengths", required=True, help="comma-separated input lengths in tokens")
    p.add_argument("--modes", default="dfs,parallel")
    p.add_argument("--out", type=Path, help="CSV path (default stdout)")
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except HomerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
