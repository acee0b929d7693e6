"""Retrieval metrics and significance testing.

nDCG uses the linear-gain trec_eval convention rel / log2(rank + 1) by
default (exponential gain behind a flag); queries that have no relevant
document in the qrels, or that are missing from the qrels entirely, are
excluded from the mean. Significance is a two-sided paired Student t-test
with Bonferroni correction; the t CDF is evaluated through the regularized
incomplete beta function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

from .data_io import RankedList
from .exceptions import DimensionMismatchError


@dataclass
class MetricReport:
    metric: str
    cutoff: int
    per_query: dict[str, float]
    mean: float
    skipped_missing_qrels: int
    skipped_no_relevant: int


def _report(metric, cutoff, per_query, missing, norelevant) -> MetricReport:
    mean = sum(per_query.values()) / len(per_query) if per_query else 0.0
    return MetricReport(metric, cutoff, per_query, mean, missing, norelevant)


def ndcg_at_k(run: list[RankedList], qrels: dict[str, dict[str, int]],
              k: int = 10, exponential_gain: bool = False) -> MetricReport:
    """Normalized discounted cumulative gain at cutoff k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")

    def gain(g: int) -> float:
        return float(2 ** g - 1) if exponential_gain else float(g)

    per_query: dict[str, float] = {}
    missing = norelevant = 0
    for ranked in run:
        judged = qrels.get(ranked.query_id)
        if judged is None:
            missing += 1
            continue
        ideal = sorted(judged.values(), reverse=True)[:k]
        idcg = sum(gain(g) / math.log2(i + 1) for i, g in enumerate(ideal, 1))
        if idcg == 0.0:
            norelevant += 1
            continue
        dcg = sum(
            gain(judged.get(did, 0)) / math.log2(i + 1)
            for i, (did, _) in enumerate(ranked.entries[:k], 1)
        )
        per_query[ranked.query_id] = dcg / idcg
    return _report("ndcg", k, per_query, missing, norelevant)


def recall_at_k(run: list[RankedList], qrels: dict[str, dict[str, int]],
                k: int = 100) -> MetricReport:
    """Fraction of a query's relevant documents found in the top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    per_query: dict[str, float] = {}
    missing = norelevant = 0
    for ranked in run:
        judged = qrels.get(ranked.query_id)
        if judged is None:
            missing += 1
            continue
        relevant = {did for did, g in judged.items() if g > 0}
        if not relevant:
            norelevant += 1
            continue
        hits = sum(1 for did, _ in ranked.entries[:k] if did in relevant)
        per_query[ranked.query_id] = hits / len(relevant)
    return _report("recall", k, per_query, missing, norelevant)


METRIC_FUNCS = {"ndcg": ndcg_at_k, "recall": recall_at_k}


def parse_metric(spec: str):
    """'ndcg@10' -> ('ndcg', 10)."""
    name, _, cutoff = spec.partition("@")
    name = name.lower()
    if name not in METRIC_FUNCS or not cutoff.isdigit():
        raise ValueError(f"unknown metric spec {spec!r} (use e.g. ndcg@10)")
    return name, int(cutoff)


# ---------------------------------------------------------------------------
# significance


@dataclass
class TTestResult:
    t: float
    p_raw: float
    p_corrected: float
    significant: bool
    degenerate: bool  # constant nonzero difference (zero variance)


def _two_sided_p(t: float, dof: int) -> float:
    # P(|T_dof| > |t|) via the regularized incomplete beta function
    if t == 0.0:
        return 1.0
    x = dof / (dof + t * t)
    return float(betainc(dof / 2.0, 0.5, x))


def paired_ttest(a, b, num_comparisons: int = 1, alpha: float = 0.05) -> TTestResult:
    """Two-sided paired Student t-test with Bonferroni correction.

    Conventions for zero-variance differences: all-zero differences give
    p = 1; a constant nonzero difference gives p = 0 and is flagged
    degenerate.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionMismatchError(f"paired samples differ: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 paired values, got {n}")
    if num_comparisons < 1:
        raise ValueError(f"num_comparisons must be >= 1, got {num_comparisons}")

    diff = a - b
    if np.all(diff == diff[0]):
        if diff[0] == 0.0:
            return TTestResult(0.0, 1.0, 1.0, False, False)
        t = math.inf if diff[0] > 0 else -math.inf
        return TTestResult(t, 0.0, 0.0, True, True)

    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    t = mean / (sd / math.sqrt(n))
    p = _two_sided_p(t, n - 1)
    p_corr = min(1.0, p * num_comparisons)
    return TTestResult(t, p, p_corr, p_corr < alpha, False)


# ---------------------------------------------------------------------------
# run comparison


@dataclass
class ComparisonRow:
    run: str
    metric: str
    mean: float
    p_raw: float | None       # None on the baseline row
    p_corrected: float | None
    significant: bool | None
    degenerate: bool = False


def compare_runs(runs: list[tuple[str, list[RankedList]]],
                 qrels: dict[str, dict[str, int]],
                 metrics: list[tuple[str, int]],
                 baseline: str,
                 num_comparisons: int | None = None,
                 alpha: float = 0.05) -> list[ComparisonRow]:
    """Mean metrics per run plus paired significance against the baseline.

    The Bonferroni family size defaults to the number of (run, metric) tests
    emitted by this call; pass num_comparisons to pin a different family.
    """
    if len(runs) < 2:
        raise ValueError("need at least 2 runs to compare")
    names = [name for name, _ in runs]
    if baseline not in names:
        raise ValueError(f"baseline {baseline!r} is not among the runs {names}")

    reports: dict[str, dict[tuple[str, int], MetricReport]] = {}
    for name, run in runs:
        reports[name] = {
            (m, k): METRIC_FUNCS[m](run, qrels, k) for m, k in metrics
        }

    n_tests = (len(runs) - 1) * len(metrics)
    family = num_comparisons if num_comparisons is not None else max(n_tests, 1)

    rows = []
    for name, _ in runs:
        for m, k in metrics:
            rep = reports[name][(m, k)]
            if name == baseline:
                rows.append(ComparisonRow(name, f"{m}@{k}", rep.mean, None, None, None))
                continue
            base = reports[baseline][(m, k)]
            common = sorted(set(rep.per_query) & set(base.per_query))
            res = paired_ttest(
                [rep.per_query[q] for q in common],
                [base.per_query[q] for q in common],
                num_comparisons=family,
                alpha=alpha,
            )
            rows.append(ComparisonRow(name, f"{m}@{k}", rep.mean, res.p_raw,
                                      res.p_corrected, res.significant, res.degenerate))
    return rows


def write_comparison_table(rows: list[ComparisonRow], path) -> None:
    """TSV with columns run, metric, mean, p_raw, p_corrected, significant."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("run\tmetric\tmean\tp_raw\tp_corrected\tsignificant\n")
        for r in rows:
            if r.p_raw is None:
                fh.write(f"{r.run}\t{r.metric}\t{r.mean:.6f}\t-\t-\t-\n")
            else:
                sig = "yes" if r.significant else "no"
                fh.write(
                    f"{r.run}\t{r.metric}\t{r.mean:.6f}\t{r.p_raw:.6g}\t"
                    f"{r.p_corrected:.6g}\t{sig}\n"
                )
