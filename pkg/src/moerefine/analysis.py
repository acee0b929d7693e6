"""Expert-activation accounting, the expert-count sweep, and raw data export
for embedding-space visualization."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .data_io import EmbeddingMatrix, RankedList
from .evaluation import ndcg_at_k, recall_at_k
from .moe_block import init_block
from .retrieval import build_index, routing_top_experts, run_queries
from .training import TrainingConfig, pairs_from_qrels, train


@dataclass
class ActivationReport:
    counts: list[int]        # documents routed to each expert
    corpus_size: int
    threshold: int           # resolved absolute document count
    activated: int           # experts with count >= threshold
    employed: int            # total experts n
    activation_pct: float


def activation_report(routing, n_experts: int,
                      threshold_count: int | None = None,
                      threshold_fraction: float | None = None) -> ActivationReport:
    """Count documents routed to each expert and apply the activation rule.

    An expert is activated when it received the top gate score for at least
    the threshold number of documents. The threshold is an absolute count
    (default 100000) or a corpus fraction, whichever is given.
    """
    routing = np.asarray(routing)
    if routing.ndim != 1:
        raise ValueError(f"routing must be 1-D expert indices, got shape {routing.shape}")
    if routing.size and (routing.min() < 0 or routing.max() >= n_experts):
        raise ValueError("routing contains expert indices out of range")
    if threshold_count is not None and threshold_fraction is not None:
        raise ValueError("give either threshold_count or threshold_fraction, not both")

    size = int(routing.size)
    if threshold_fraction is not None:
        if not 0.0 < threshold_fraction <= 1.0:
            raise ValueError(f"threshold_fraction must be in (0, 1], got {threshold_fraction}")
        threshold = max(1, int(np.ceil(threshold_fraction * size)))
    else:
        threshold = threshold_count if threshold_count is not None else 100000
        if threshold < 1:
            raise ValueError(f"threshold_count must be >= 1, got {threshold}")

    counts = np.bincount(routing, minlength=n_experts).tolist()
    activated = sum(1 for c in counts if c >= threshold)
    return ActivationReport(
        counts=counts,
        corpus_size=size,
        threshold=threshold,
        activated=activated,
        employed=n_experts,
        activation_pct=100.0 * activated / n_experts,
    )


# ---------------------------------------------------------------------------
# expert-count sweep


@dataclass
class SweepRow:
    n_experts: int
    variant: str             # "identity" for the baseline row
    ndcg: float
    recall: float
    activated: int | None


@dataclass
class SweepResult:
    rows: list[SweepRow]
    timings: list[tuple[int, float]]  # (n_experts, train seconds)
    ndcg_k: int
    recall_k: int


def sweep(corpus: EmbeddingMatrix, queries: EmbeddingMatrix, qrels,
          config: TrainingConfig, n_values=(3, 6, 9, 12),
          variants=("top1", "all"), ndcg_k: int = 10, recall_k: int = 100,
          threshold_fraction: float = 0.01, activation: str = "relu") -> SweepResult:
    """Train one block per expert count and evaluate both pooling variants.

    Each count n uses a fresh block initialized with seed config.seed + n.
    The identity baseline is evaluated once. Wall-clock timings are reported
    separately so the result table itself is byte-stable across reruns.
    """
    if not n_values:
        raise ValueError("n_values must not be empty")
    pairs = pairs_from_qrels(queries, corpus, qrels)
    k_search = max(ndcg_k, recall_k)

    rows = []
    baseline_index = build_index(corpus, None, "identity")
    baseline_run = run_queries(queries, None, "identity", baseline_index, k_search)
    rows.append(SweepRow(
        0, "identity",
        ndcg_at_k(baseline_run, qrels, ndcg_k).mean,
        recall_at_k(baseline_run, qrels, recall_k).mean,
        None,
    ))

    timings = []
    for n in n_values:
        cfg = replace(config, seed=config.seed + n)
        block0 = init_block(corpus.dim, n, cfg.seed, activation=activation)
        start = time.perf_counter()
        ckpt, _ = train(cfg, pairs, block0)
        timings.append((n, time.perf_counter() - start))
        for variant in variants:
            index = build_index(corpus, ckpt.block, variant)
            run = run_queries(queries, ckpt.block, variant, index, k_search)
            report = activation_report(
                routing_top_experts(index), n, threshold_fraction=threshold_fraction
            )
            rows.append(SweepRow(
                n, variant,
                ndcg_at_k(run, qrels, ndcg_k).mean,
                recall_at_k(run, qrels, recall_k).mean,
                report.activated,
            ))
    return SweepResult(rows, timings, ndcg_k, recall_k)


def write_sweep_table(result: SweepResult, path) -> None:
    """Deterministic sweep table: n, variant, ndcg@k, recall@k, activated."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"n_experts\tvariant\tndcg@{result.ndcg_k}\t"
                 f"recall@{result.recall_k}\tactivated\n")
        for r in result.rows:
            act = "-" if r.activated is None else str(r.activated)
            fh.write(f"{r.n_experts}\t{r.variant}\t{r.ndcg:.6f}\t{r.recall:.6f}\t{act}\n")


def write_sweep_timings(result: SweepResult, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("n_experts\ttrain_seconds\n")
        for n, seconds in result.timings:
            fh.write(f"{n}\t{seconds:.3f}\n")


# ---------------------------------------------------------------------------
# visualization export


def export_viz(query_id: str, run: list[RankedList],
               raw_queries: EmbeddingMatrix, refined_queries,
               query_routing, raw_corpus: EmbeddingMatrix, refined_corpus,
               corpus_routing, path, top_k: int = 1000) -> int:
    """Raw and refined vectors of a query and its top retrieved documents.

    TSV columns: id, kind (query|doc), expert, rank, raw_0..raw_{d-1},
    refined_0..refined_{d-1}. Floats are printed with 9 significant digits,
    enough to reproduce the float32 values exactly. The expert column is -1
    when there is no routing (identity refinement). Returns the number of
    rows written (1 + retrieved documents).
    """
    ranked = next((r for r in run if r.query_id == query_id), None)
    if ranked is None:
        raise ValueError(f"query {query_id!r} not present in the run")
    qpos = {qid: i for i, qid in enumerate(raw_queries.ids)}
    dpos = {did: i for i, did in enumerate(raw_corpus.ids)}
    if query_id not in qpos:
        raise ValueError(f"query {query_id!r} missing from query embeddings")

    def expert_of(routing, i) -> int:
        if routing is None:
            return -1
        r = np.asarray(routing)
        if r.ndim == 1:
            return int(r[i])
        return int(np.argmax(r[i]))

    def fmt(vec) -> str:
        return "\t".join("%.9g" % v for v in vec)

    dim = raw_queries.dim
    rows = 0
    with open(path, "w", encoding="utf-8") as fh:
        header = ["id", "kind", "expert", "rank"]
        header += [f"raw_{i}" for i in range(dim)]
        header += [f"refined_{i}" for i in range(dim)]
        fh.write("\t".join(header) + "\n")
        qi = qpos[query_id]
        fh.write(f"{query_id}\tquery\t{expert_of(query_routing, qi)}\t0\t"
                 f"{fmt(raw_queries.vectors[qi])}\t{fmt(refined_queries[qi])}\n")
        rows += 1
        for rank, (did, _) in enumerate(ranked.entries[:top_k], 1):
            di = dpos[did]
            fh.write(f"{did}\tdoc\t{expert_of(corpus_routing, di)}\t{rank}\t"
                     f"{fmt(raw_corpus.vectors[di])}\t{fmt(refined_corpus[di])}\n")
            rows += 1
    return rows
