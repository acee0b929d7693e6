"""Refine a corpus through the block, score queries by dot product, and
produce deterministic ranked lists.

Scoring is exhaustive (every query against every document) with float64
accumulation. Ranking ties are broken by ascending document id. A refined
index remembers the fingerprint of the checkpoint that produced it; queries
refined with a different checkpoint or pooling mode are rejected.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ._backend import kernels
from .data_io import (
    EmbeddingMatrix,
    RankedList,
    read_embeddings,
    write_embeddings,
)
from .exceptions import DimensionMismatchError, FileFormatError, FingerprintMismatchError
from .moe_block import MoEBlock, block_fingerprint, refine_batch
from .numerics import argmax_rows_tiebreak

IDENTITY_FINGERPRINT = "identity"
IDENTITY_MODE = "identity"


@dataclass
class RefinedIndex:
    vectors: np.ndarray        # (count, dim) float32, refined
    ids: list[str]
    routing: np.ndarray | None  # expert per doc (top1 modes) or weights (all modes)
    mode: str
    fingerprint: str

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass
class RefinedQueries:
    vectors: np.ndarray
    ids: list[str]
    routing: np.ndarray | None
    mode: str
    fingerprint: str


def _refine(matrix: EmbeddingMatrix, block: MoEBlock | None, mode: str, rng):
    if block is None or mode == IDENTITY_MODE:
        if not (block is None and mode == IDENTITY_MODE):
            raise ValueError("identity mode takes no block and vice versa")
        return matrix.vectors.copy(), None, IDENTITY_FINGERPRINT
    if matrix.dim != block.dim:
        raise DimensionMismatchError(
            f"embeddings have dimension {matrix.dim}, block expects {block.dim}"
        )
    refined, routing = refine_batch(matrix.vectors, block, mode=mode, rng=rng)
    return refined, routing, block_fingerprint(block)


def build_index(corpus: EmbeddingMatrix, block: MoEBlock | None, mode: str,
                rng=None) -> RefinedIndex:
    """Row-wise refinement of a corpus with routing telemetry."""
    refined, routing, fingerprint = _refine(corpus, block, mode, rng)
    return RefinedIndex(refined, list(corpus.ids), routing, mode, fingerprint)


def refine_queries(queries: EmbeddingMatrix, block: MoEBlock | None, mode: str,
                   rng=None) -> RefinedQueries:
    refined, routing, fingerprint = _refine(queries, block, mode, rng)
    return RefinedQueries(refined, list(queries.ids), routing, mode, fingerprint)


def _file_score(score: float) -> float:
    # the score as it will appear in a run file (float32, 6 significant digits)
    return float("%.6g" % float(np.float32(score)))


def search_topk(query: np.ndarray, index: RefinedIndex, k: int,
                fingerprint: str = IDENTITY_FINGERPRINT,
                query_id: str = "q") -> RankedList:
    """Top-k documents by dot product for one refined query vector.

    The query must carry the fingerprint of the checkpoint it was refined
    with (IDENTITY_FINGERPRINT for raw vectors); it has to match the index.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if fingerprint != index.fingerprint:
        raise FingerprintMismatchError(
            f"query fingerprint {fingerprint[:12]}... does not match index "
            f"{index.fingerprint[:12]}..."
        )
    query = np.asarray(query)
    if query.ndim != 1 or query.shape[0] != index.dim:
        raise DimensionMismatchError(
            f"query has shape {query.shape}, index dimension is {index.dim}"
        )
    if len(index) == 0:
        return RankedList(query_id, [])
    scores = kernels.dot_scores(
        np.ascontiguousarray(query[None, :]), index.vectors
    )[0]
    ids_arr = np.asarray(index.ids)
    order = np.lexsort((ids_arr, -scores))[:k]
    entries = [(index.ids[i], _file_score(scores[i])) for i in order]
    return RankedList(query_id, entries)


def run_queries(queries: EmbeddingMatrix, block: MoEBlock | None, mode: str,
                index: RefinedIndex, k: int, rng=None) -> list[RankedList]:
    """Refine every query with the same block/mode as the index and search.

    Returns one RankedList per query, in input order.
    """
    rq = refine_queries(queries, block, mode, rng)
    if rq.mode != index.mode:
        raise FingerprintMismatchError(
            f"query mode {rq.mode!r} does not match index mode {index.mode!r}"
        )
    return [
        search_topk(rq.vectors[i], index, k, fingerprint=rq.fingerprint,
                    query_id=rq.ids[i])
        for i in range(len(rq.ids))
    ]


# ---------------------------------------------------------------------------
# on-disk index (a directory):
#   refined.emb / refined.emb.ids   refined vectors (embedding file format)
#   meta.txt                        key=value: mode, fingerprint, dim, count
#   routing.tsv                     doc_id <TAB> expert [<TAB> w0 ... w{n-1}]
#                                   (absent for identity indexes)


def save_index(index: RefinedIndex, dirpath) -> None:
    os.makedirs(dirpath, exist_ok=True)
    write_embeddings(EmbeddingMatrix(index.vectors, index.ids),
                     os.path.join(dirpath, "refined.emb"))
    with open(os.path.join(dirpath, "meta.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"mode={index.mode}\n")
        fh.write(f"fingerprint={index.fingerprint}\n")
        fh.write(f"dim={index.dim}\n")
        fh.write(f"count={len(index)}\n")
    routing_path = os.path.join(dirpath, "routing.tsv")
    if index.routing is None:
        if os.path.exists(routing_path):
            os.remove(routing_path)
        return
    with open(routing_path, "w", encoding="utf-8") as fh:
        if index.routing.ndim == 1:
            for did, e in zip(index.ids, index.routing):
                fh.write(f"{did}\t{int(e)}\n")
        else:
            top = argmax_rows_tiebreak(index.routing)
            for i, did in enumerate(index.ids):
                ws = "\t".join("%.9g" % w for w in index.routing[i])
                fh.write(f"{did}\t{int(top[i])}\t{ws}\n")


def load_index(dirpath) -> RefinedIndex:
    meta: dict[str, str] = {}
    with open(os.path.join(dirpath, "meta.txt"), encoding="utf-8") as fh:
        for line in fh:
            key, value = line.rstrip("\n").split("=", 1)
            meta[key] = value
    matrix = read_embeddings(os.path.join(dirpath, "refined.emb"))
    if matrix.dim != int(meta["dim"]) or len(matrix) != int(meta["count"]):
        raise FileFormatError(f"{dirpath}: meta.txt disagrees with refined.emb")
    routing = None
    routing_path = os.path.join(dirpath, "routing.tsv")
    if os.path.exists(routing_path):
        rows = []
        with open(routing_path, encoding="utf-8") as fh:
            rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
        if len(rows) != len(matrix):
            raise FileFormatError(f"{dirpath}: routing rows do not match vector count")
        if rows and len(rows[0]) == 2:
            routing = np.array([int(r[1]) for r in rows], dtype=np.int64)
        else:
            routing = np.array([[float(w) for w in r[2:]] for r in rows],
                               dtype=np.float32)
    return RefinedIndex(matrix.vectors, matrix.ids, routing, meta["mode"],
                        meta["fingerprint"])


def routing_top_experts(index: RefinedIndex) -> np.ndarray:
    """Per-document top expert, regardless of the index's pooling mode."""
    if index.routing is None:
        raise ValueError("identity index has no routing")
    if index.routing.ndim == 1:
        return index.routing
    return argmax_rows_tiebreak(index.routing)
