"""File formats, the synthetic multi-domain dataset generator, and config
parsing.

Embedding file (binary, little-endian), with identifiers in a sidecar file
at ``<path>.ids`` (one UTF-8 id per line, order-aligned):

    bytes 0-3   magic "SBME"
    u32         format version (1)
    u64         row count
    u32         dimension
    f32 payload row-major, count * dim values

Qrels are text lines ``qid 0 docid grade``; run files are TREC-style lines
``qid Q0 docid rank score tag`` with ranks contiguous from 1 and scores
non-increasing, printed with 6 significant digits.

Config files are ``key=value`` lines ('#' starts a comment); keys mirror the
CLI option names with '-' replaced by '_'.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    BadHeaderError,
    ConfigError,
    FileFormatError,
    IdCountMismatchError,
    TruncatedFileError,
)
from .numerics import make_rng

EMBEDDING_MAGIC = b"SBME"
EMBEDDING_VERSION = 1


@dataclass
class EmbeddingMatrix:
    """Row-major float32 vectors with aligned string identifiers."""

    vectors: np.ndarray
    ids: list[str]

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {self.vectors.shape}")
        if len(self.ids) != self.vectors.shape[0]:
            raise IdCountMismatchError(
                f"{len(self.ids)} ids for {self.vectors.shape[0]} vectors"
            )

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass
class RankedList:
    """Ranked retrieval output for one query: (doc_id, score) by descending
    score, ties broken by ascending doc id."""

    query_id: str
    entries: list[tuple[str, float]]


def _ids_path(path) -> str:
    return str(path) + ".ids"


def write_embeddings(matrix: EmbeddingMatrix, path) -> None:
    if len(set(matrix.ids)) != len(matrix.ids):
        raise IdCountMismatchError("duplicate identifiers")
    vecs = np.ascontiguousarray(matrix.vectors, dtype="<f4")
    count, dim = vecs.shape
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<IQI", EMBEDDING_VERSION, count, dim))
        fh.write(vecs.tobytes())
    with open(_ids_path(path), "w", encoding="utf-8") as fh:
        for i in matrix.ids:
            fh.write(i + "\n")


def read_embeddings(path) -> EmbeddingMatrix:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 20 or data[:4] != EMBEDDING_MAGIC:
        raise BadHeaderError(f"{path}: not an embedding file (bad magic)")
    version, count, dim = struct.unpack("<IQI", data[4:20])
    if version != EMBEDDING_VERSION:
        raise BadHeaderError(f"{path}: unsupported version {version}")
    need = 20 + count * dim * 4
    if len(data) < need:
        raise TruncatedFileError(
            f"{path}: payload truncated ({len(data)} bytes, need {need})"
        )
    if len(data) > need:
        raise FileFormatError(f"{path}: {len(data) - need} trailing bytes")
    vecs = np.frombuffer(data, dtype="<f4", count=count * dim, offset=20)
    vecs = vecs.reshape(count, dim).copy()
    if not np.all(np.isfinite(vecs)):
        raise FileFormatError(f"{path}: non-finite values in payload")
    with open(_ids_path(path), encoding="utf-8") as fh:
        ids = [line.rstrip("\n") for line in fh]
    if len(ids) != count:
        raise IdCountMismatchError(
            f"{path}: header count {count} but {len(ids)} ids"
        )
    if len(set(ids)) != len(ids):
        raise IdCountMismatchError(f"{path}: duplicate identifiers")
    return EmbeddingMatrix(vecs, ids)


# ---------------------------------------------------------------------------
# qrels and run files


def read_qrels(path) -> dict[str, dict[str, int]]:
    qrels: dict[str, dict[str, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FileFormatError(f"{path}:{lineno}: expected 'qid 0 docid grade'")
            qid, _, did, grade = parts
            try:
                g = int(grade)
            except ValueError:
                raise FileFormatError(f"{path}:{lineno}: grade {grade!r} is not an integer")
            if g < 0:
                raise FileFormatError(f"{path}:{lineno}: negative grade")
            if did in qrels.get(qid, {}):
                raise FileFormatError(f"{path}:{lineno}: duplicate pair ({qid}, {did})")
            qrels.setdefault(qid, {})[did] = g
    return qrels


def write_qrels(qrels: dict[str, dict[str, int]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in qrels:
            for did, grade in qrels[qid].items():
                fh.write(f"{qid} 0 {did} {grade}\n")


def format_score(score: float) -> str:
    """Run-file score: value narrowed to float32, 6 significant digits."""
    return "%.6g" % float(np.float32(score))


def write_run(run: list[RankedList], path, tag: str = "moerefine") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ranked in run:
            for rank, (did, score) in enumerate(ranked.entries, 1):
                fh.write(f"{ranked.query_id} Q0 {did} {rank} {format_score(score)} {tag}\n")


def read_run(path) -> list[RankedList]:
    per_query: dict[str, list[tuple[int, str, float]]] = {}
    order: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise FileFormatError(
                    f"{path}:{lineno}: expected 'qid Q0 docid rank score tag'"
                )
            qid, _, did, rank, score, _ = parts
            if qid not in per_query:
                per_query[qid] = []
                order.append(qid)
            per_query[qid].append((int(rank), did, float(score)))
    run = []
    for qid in order:
        rows = sorted(per_query[qid])
        ranks = [r for r, _, _ in rows]
        if ranks != list(range(1, len(rows) + 1)):
            raise FileFormatError(f"{path}: ranks for {qid} are not contiguous from 1")
        scores = [s for _, _, s in rows]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise FileFormatError(f"{path}: scores for {qid} increase with rank")
        run.append(RankedList(qid, [(did, s) for _, did, s in rows]))
    return run


# ---------------------------------------------------------------------------
# synthetic multi-domain data


@dataclass
class SyntheticSpec:
    num_domains: int = 3
    dim: int = 32
    docs_per_domain: int = 1000
    queries_per_domain: int = 100
    positives_per_query: int = 1
    transform_scale: float = 0.6
    noise: float = 0.12
    seed: int = 42

    def validate(self) -> None:
        if self.num_domains < 1:
            raise ConfigError(f"num_domains must be >= 1, got {self.num_domains}")
        for name in ("docs_per_domain", "queries_per_domain", "positives_per_query"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.positives_per_query > self.docs_per_domain:
            raise ConfigError("positives_per_query exceeds docs_per_domain")
        if self.dim < self.num_domains:
            raise ConfigError(
                f"dim {self.dim} < num_domains {self.num_domains}: "
                "cannot build near-orthogonal domain centers"
            )
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")


def _orthonormal_rows(rng, k: int, dim: int) -> np.ndarray:
    """k orthonormal directions via modified Gram-Schmidt (no LAPACK, so the
    output depends only on the random stream)."""
    basis = np.zeros((k, dim))
    got = 0
    while got < k:
        v = rng.standard_normal(dim)
        for b in basis[:got]:
            v -= (v @ b) * b
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            basis[got] = v / norm
            got += 1
    return basis


# embedding norm of the domain centers; dot-product spreads need to be O(1)
# for the contrastive softmax at temperature 1 to carry useful gradient
_CENTER_NORM = 2.0

# fraction of the domain-center component a query keeps: queries from every
# domain end up in one overlapping region, so the per-domain repair has to
# happen on the document side, where the domains are separable
_CENTER_KEEP = 0.1

# rotation planes shared by all domains with per-domain conflicting angles;
# one global correction cannot help every domain at once
_ROT_PLANES = 7
_ANGLE_CYCLE = (1.0, -1.0, 0.5, -0.5, 0.25, -0.25)


def gen_synthetic(spec: SyntheticSpec):
    """Deterministic multi-domain corpus, queries, and qrels.

    Documents cluster around orthogonal domain centers. Each query is one of
    its relevant documents passed through a domain-specific invertible linear
    distortion plus Gaussian noise: the center component is scaled down to
    _CENTER_KEEP and the remainder is rotated inside a set of planes shared
    across domains, by per-domain conflicting angles. Undoing one domain's
    rotation makes another domain worse, so no single global linear
    correction aligns all domains, while an expert dedicated to one domain
    can undo its distortion.

    Returns (corpus, queries, qrels).
    """
    spec.validate()
    rng = make_rng(spec.seed)
    k, dim = spec.num_domains, spec.dim
    centers = _orthonormal_rows(rng, k, dim) * _CENTER_NORM

    n_planes = max(1, min(_ROT_PLANES, dim // 2))
    planes = _orthonormal_rows(rng, 2 * n_planes, dim)

    def distort(domain: int, v: np.ndarray) -> np.ndarray:
        out = v.astype(np.float64).copy()
        chat = centers[domain] / _CENTER_NORM
        out += (_CENTER_KEEP - 1.0) * (out @ chat) * chat
        theta = spec.transform_scale * _ANGLE_CYCLE[domain % len(_ANGLE_CYCLE)]
        for p in range(n_planes):
            u1, u2 = planes[2 * p], planes[2 * p + 1]
            c1 = out @ u1
            c2 = out @ u2
            out += (np.cos(theta) * c1 - np.sin(theta) * c2 - c1) * u1
            out += (np.sin(theta) * c1 + np.cos(theta) * c2 - c2) * u2
        return out

    sigma = spec.noise * _CENTER_NORM  # noise level is relative to the center norm
    doc_vecs = np.zeros((k * spec.docs_per_domain, dim))
    doc_ids = []
    for dom in range(k):
        noise = rng.standard_normal((spec.docs_per_domain, dim)) * sigma
        rows = centers[dom][None, :] + noise
        start = dom * spec.docs_per_domain
        doc_vecs[start:start + spec.docs_per_domain] = rows
        doc_ids.extend(f"d{start + i:06d}" for i in range(spec.docs_per_domain))

    n_queries = k * spec.queries_per_domain
    query_vecs = np.zeros((n_queries, dim))
    query_ids = [f"q{i:05d}" for i in range(n_queries)]
    qrels: dict[str, dict[str, int]] = {}
    qi = 0
    for dom in range(k):
        start = dom * spec.docs_per_domain
        for _ in range(spec.queries_per_domain):
            local = rng.choice(spec.docs_per_domain, size=spec.positives_per_query,
                               replace=False)
            src = doc_vecs[start + local[0]]
            q = distort(dom, src) + rng.standard_normal(dim) * sigma
            query_vecs[qi] = q
            qrels[query_ids[qi]] = {doc_ids[start + j]: 1 for j in sorted(local)}
            qi += 1

    corpus = EmbeddingMatrix(doc_vecs.astype(np.float32), doc_ids)
    queries = EmbeddingMatrix(query_vecs.astype(np.float32), query_ids)
    return corpus, queries, qrels


# ---------------------------------------------------------------------------
# config files


def load_config(path) -> dict[str, str]:
    """Parse a key=value config file; '#' starts a comment."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            out[key] = value.strip()
    return out
