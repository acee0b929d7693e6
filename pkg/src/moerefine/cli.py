"""Command-line interface.

Subcommands: synth, train, index, search, evaluate, compare, activation,
sweep, export-viz. All randomness flows from --seed, so any pipeline rerun
with identical flags produces byte-identical output files.

A key=value config file (--config, or the MOEREFINE_CONFIG environment
variable) overrides built-in defaults; explicit command-line flags win over
the config file. Keys mirror the long option names with '-' replaced by '_';
keys that do not apply to the invoked subcommand are ignored.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import analysis, data_io, evaluation, retrieval, training
from .exceptions import MoeRefineError
from .moe_block import init_block, load_checkpoint, save_checkpoint
from .numerics import make_rng

CONFIG_ENV_VAR = "MOEREFINE_CONFIG"

_INFERENCE_MODES = ("top1", "all", "random-top1", "random-all", "identity")


def _parse_bool(raw: str) -> bool:
    return raw.strip().lower() in ("1", "true", "yes", "on")


def _apply_config(parser: argparse.ArgumentParser, config: dict[str, str]) -> None:
    for action in parser._actions:
        if action.dest not in config:
            continue
        raw = config[action.dest]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            value = _parse_bool(raw)
        elif action.type is not None:
            try:
                value = action.type(raw)
            except (TypeError, ValueError):
                raise data_io.ConfigError(
                    f"config key {action.dest}: cannot parse {raw!r}"
                ) from None
        else:
            value = raw
        action.default = value
        action.required = False


def _comma_ints(raw: str) -> list[int]:
    return [int(v) for v in raw.split(",") if v]


def _add_synth(sub):
    p = sub.add_parser("synth", help="generate a synthetic multi-domain dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--domains", type=int, default=3)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--docs-per-domain", type=int, default=1000)
    p.add_argument("--queries-per-domain", type=int, default=100)
    p.add_argument("--positives", type=int, default=1)
    p.add_argument("--transform-scale", type=float, default=0.6)
    p.add_argument("--noise", type=float, default=0.12)
    p.add_argument("--seed", type=int, default=42)
    return p


def _cmd_synth(args) -> int:
    spec = data_io.SyntheticSpec(
        num_domains=args.domains,
        dim=args.dim,
        docs_per_domain=args.docs_per_domain,
        queries_per_domain=args.queries_per_domain,
        positives_per_query=args.positives,
        transform_scale=args.transform_scale,
        noise=args.noise,
        seed=args.seed,
    )
    corpus, queries, qrels = data_io.gen_synthetic(spec)
    os.makedirs(args.out_dir, exist_ok=True)
    data_io.write_embeddings(corpus, os.path.join(args.out_dir, "corpus.emb"))
    data_io.write_embeddings(queries, os.path.join(args.out_dir, "queries.emb"))
    data_io.write_qrels(qrels, os.path.join(args.out_dir, "qrels.txt"))
    print(f"wrote {len(corpus)} docs, {len(queries)} queries to {args.out_dir}")
    return 0


def _add_train(sub):
    p = sub.add_parser("train", help="train a refinement block")
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--loss-log", default=None, help="epoch loss TSV output")
    p.add_argument("--experts", type=int, default=6)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--val-fraction", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--activation", choices=("relu", "gelu"), default="relu")
    p.add_argument("--gate-mode", choices=("learned", "random"), default="learned")
    p.add_argument("--random-variant", choices=("all", "top1"), default="all")
    p.add_argument("--unscaled-gate", action="store_true",
                   help="do not scale the routed output by its gate probability")
    return p


def _cmd_train(args) -> int:
    corpus = data_io.read_embeddings(args.corpus)
    queries = data_io.read_embeddings(args.queries)
    qrels = data_io.read_qrels(args.qrels)
    pairs = training.pairs_from_qrels(queries, corpus, qrels)
    config = training.TrainingConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        temperature=args.temperature,
        seed=args.seed,
        val_fraction=args.val_fraction,
        scaled_gate=not args.unscaled_gate,
        gate_mode=args.gate_mode,
        random_variant=args.random_variant,
    )
    block = init_block(corpus.dim, args.experts, args.seed, activation=args.activation)
    ckpt, history = training.train(config, pairs, block)
    save_checkpoint(ckpt.block, args.out)
    if args.loss_log:
        training.write_loss_log(history, args.loss_log)
    print(f"best epoch {ckpt.epoch} val_loss {ckpt.val_loss:.6f} -> {args.out}")
    return 0


def _add_index(sub):
    p = sub.add_parser("index", help="refine a corpus into a searchable index")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--mode", choices=_INFERENCE_MODES, default="top1")
    p.add_argument("--seed", type=int, default=42, help="rng seed for random modes")
    p.add_argument("--out-dir", required=True)
    return p


def _load_block_for_mode(checkpoint, mode):
    if mode == "identity":
        if checkpoint:
            raise MoeRefineError("identity mode does not take a checkpoint")
        return None
    if not checkpoint:
        raise MoeRefineError(f"mode {mode} needs --checkpoint")
    return load_checkpoint(checkpoint)


def _cmd_index(args) -> int:
    corpus = data_io.read_embeddings(args.corpus)
    block = _load_block_for_mode(args.checkpoint, args.mode)
    rng = make_rng(args.seed) if args.mode.startswith("random") else None
    index = retrieval.build_index(corpus, block, args.mode, rng=rng)
    retrieval.save_index(index, args.out_dir)
    print(f"indexed {len(index)} docs ({args.mode}) -> {args.out_dir}")
    return 0


def _add_search(sub):
    p = sub.add_parser("search", help="run queries against an index")
    p.add_argument("--queries", required=True)
    p.add_argument("--index", required=True, help="index directory")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--mode", choices=_INFERENCE_MODES, default="top1")
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--tag", default="moerefine")
    p.add_argument("--out", required=True, help="run file output path")
    return p


def _cmd_search(args) -> int:
    queries = data_io.read_embeddings(args.queries)
    index = retrieval.load_index(args.index)
    block = _load_block_for_mode(args.checkpoint, args.mode)
    rng = make_rng(args.seed) if args.mode.startswith("random") else None
    run = retrieval.run_queries(queries, block, args.mode, index, args.k, rng=rng)
    data_io.write_run(run, args.out, tag=args.tag)
    print(f"wrote run for {len(run)} queries -> {args.out}")
    return 0


def _add_evaluate(sub):
    p = sub.add_parser("evaluate", help="score a run file against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metrics", nargs="+", default=["ndcg@10", "recall@100"])
    p.add_argument("--per-query", default=None, help="per-query values TSV")
    return p


def _cmd_evaluate(args) -> int:
    run = data_io.read_run(args.run)
    qrels = data_io.read_qrels(args.qrels)
    reports = []
    for spec in args.metrics:
        name, k = evaluation.parse_metric(spec)
        reports.append(evaluation.METRIC_FUNCS[name](run, qrels, k))
    for rep in reports:
        print(f"{rep.metric}@{rep.cutoff}\t{rep.mean:.5f}")
        if rep.skipped_missing_qrels:
            print(f"# {rep.skipped_missing_qrels} run queries missing from qrels",
                  file=sys.stderr)
    if args.per_query:
        with open(args.per_query, "w", encoding="utf-8") as fh:
            fh.write("metric\tquery_id\tvalue\n")
            for rep in reports:
                for qid in sorted(rep.per_query):
                    fh.write(f"{rep.metric}@{rep.cutoff}\t{qid}\t{rep.per_query[qid]:.6f}\n")
    return 0


def _add_compare(sub):
    p = sub.add_parser("compare", help="compare runs with paired t-tests")
    p.add_argument("--runs", nargs="+", required=True, metavar="NAME=PATH")
    p.add_argument("--baseline", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metrics", nargs="+", default=["ndcg@10", "recall@100"])
    p.add_argument("--num-comparisons", type=int, default=None,
                   help="Bonferroni family size (default: tests in this table)")
    p.add_argument("--out", required=True, help="comparison table TSV")
    return p


def _cmd_compare(args) -> int:
    runs = []
    for item in args.runs:
        if "=" not in item:
            raise MoeRefineError(f"--runs items must be NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        runs.append((name, data_io.read_run(path)))
    qrels = data_io.read_qrels(args.qrels)
    metrics = [evaluation.parse_metric(m) for m in args.metrics]
    rows = evaluation.compare_runs(runs, qrels, metrics, args.baseline,
                                   num_comparisons=args.num_comparisons)
    evaluation.write_comparison_table(rows, args.out)
    with open(args.out, encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return 0


def _add_activation(sub):
    p = sub.add_parser("activation", help="expert activation report for an index")
    p.add_argument("--index", required=True, help="index directory")
    p.add_argument("--experts", type=int, required=True)
    p.add_argument("--threshold-fraction", type=float, default=0.01)
    p.add_argument("--threshold-count", type=int, default=None)
    p.add_argument("--out", default=None)
    return p


def _cmd_activation(args) -> int:
    index = retrieval.load_index(args.index)
    routing = retrieval.routing_top_experts(index)
    if args.threshold_count is not None:
        report = analysis.activation_report(routing, args.experts,
                                            threshold_count=args.threshold_count)
    else:
        report = analysis.activation_report(routing, args.experts,
                                            threshold_fraction=args.threshold_fraction)
    lines = [
        f"corpus_size\t{report.corpus_size}",
        f"threshold\t{report.threshold}",
        f"employed\t{report.employed}",
        f"activated\t{report.activated}",
        f"activation_pct\t{report.activation_pct:.2f}",
    ]
    lines += [f"expert_{i}\t{c}" for i, c in enumerate(report.counts)]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return 0


def _add_sweep(sub):
    p = sub.add_parser("sweep", help="train and evaluate a range of expert counts")
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--n-values", type=_comma_ints, default=[3, 6, 9, 12])
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--val-fraction", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--activation", choices=("relu", "gelu"), default="relu")
    p.add_argument("--threshold-fraction", type=float, default=0.01)
    p.add_argument("--out-dir", required=True)
    return p


def _cmd_sweep(args) -> int:
    corpus = data_io.read_embeddings(args.corpus)
    queries = data_io.read_embeddings(args.queries)
    qrels = data_io.read_qrels(args.qrels)
    config = training.TrainingConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        temperature=args.temperature,
        seed=args.seed,
        val_fraction=args.val_fraction,
    )
    result = analysis.sweep(corpus, queries, qrels, config,
                            n_values=args.n_values,
                            threshold_fraction=args.threshold_fraction,
                            activation=args.activation)
    os.makedirs(args.out_dir, exist_ok=True)
    table = os.path.join(args.out_dir, "sweep.tsv")
    analysis.write_sweep_table(result, table)
    analysis.write_sweep_timings(result, os.path.join(args.out_dir, "sweep_timings.tsv"))
    with open(table, encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return 0


def _add_export_viz(sub):
    p = sub.add_parser("export-viz", help="export raw+refined vectors for one query")
    p.add_argument("--query-id", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--queries", required=True, help="raw query embeddings")
    p.add_argument("--corpus", required=True, help="raw corpus embeddings")
    p.add_argument("--index", required=True, help="index directory (refined corpus)")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--mode", choices=_INFERENCE_MODES, default="top1")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--top-k", type=int, default=1000)
    p.add_argument("--out", required=True)
    return p


def _cmd_export_viz(args) -> int:
    run = data_io.read_run(args.run)
    raw_queries = data_io.read_embeddings(args.queries)
    raw_corpus = data_io.read_embeddings(args.corpus)
    index = retrieval.load_index(args.index)
    block = _load_block_for_mode(args.checkpoint, args.mode)
    rng = make_rng(args.seed) if args.mode.startswith("random") else None
    rq = retrieval.refine_queries(raw_queries, block, args.mode, rng=rng)
    if rq.fingerprint != index.fingerprint or rq.mode != index.mode:
        raise MoeRefineError("checkpoint/mode do not match the index")
    rows = analysis.export_viz(
        args.query_id, run, raw_queries, rq.vectors, rq.routing,
        raw_corpus, index.vectors, index.routing, args.out, top_k=args.top_k,
    )
    print(f"wrote {rows} rows -> {args.out}")
    return 0


def build_parser(config: dict[str, str] | None = None) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moerefine",
        description="Mixture-of-experts refinement of precomputed retrieval embeddings",
    )
    parser.add_argument("--config", default=None, help="key=value config file")
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = [
        _add_synth(sub), _add_train(sub), _add_index(sub), _add_search(sub),
        _add_evaluate(sub), _add_compare(sub), _add_activation(sub),
        _add_sweep(sub), _add_export_viz(sub),
    ]
    if config:
        for sp in subparsers:
            _apply_config(sp, config)
    return parser


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "index": _cmd_index,
    "search": _cmd_search,
    "evaluate": _cmd_evaluate,
    "compare": _cmd_compare,
    "activation": _cmd_activation,
    "sweep": _cmd_sweep,
    "export-viz": _cmd_export_viz,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)

    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    config_path = known.config or os.environ.get(CONFIG_ENV_VAR)
    try:
        config = data_io.load_config(config_path) if config_path else None
        parser = build_parser(config)
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except (MoeRefineError, OSError, ValueError) as exc:
        print(f"moerefine: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
