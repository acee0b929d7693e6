"""Contrastive training of the refinement block on frozen base embeddings.

Only the block's parameters train. Each step refines a minibatch of query
embeddings and their positive-document embeddings through noisy top-1
routing, scores every query against every document in the batch (in-batch
negatives), and applies analytic gradients with Adam. After each epoch a
noise-free validation loss is computed and the checkpoint with the lowest
validation loss is kept.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._backend import kernels
from .exceptions import ConfigError, DimensionMismatchError
from .moe_block import (
    _ACT_IDS,
    ExpertParams,
    GateParams,
    MoEBlock,
    RefineRecord,
    noisy_top1_batch,
    random_all_batch,
    random_top1_batch,
)
from .numerics import make_rng, softmax_rows

GATE_MODES = ("learned", "random")
RANDOM_VARIANTS = ("all", "top1")


@dataclass
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-4
    temperature: float = 1.0
    seed: int = 42
    val_fraction: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    scaled_gate: bool = True        # scale the routed output by its gate prob
    gate_mode: str = "learned"      # "random" trains the random-gate ablation
    random_variant: str = "all"     # routing shape when gate_mode == "random"
    load_balance_weight: float = 0.0  # reserved flag, must stay 0.0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"unknown gate_mode {self.gate_mode!r}")
        if self.random_variant not in RANDOM_VARIANTS:
            raise ConfigError(f"unknown random_variant {self.random_variant!r}")
        if self.load_balance_weight != 0.0:
            raise NotImplementedError("auxiliary load-balancing loss is reserved, keep it at 0.0")


@dataclass
class TrainPair:
    query: np.ndarray
    doc: np.ndarray
    query_id: str
    doc_id: str


@dataclass
class Checkpoint:
    block: MoEBlock
    epoch: int
    val_loss: float


def pairs_from_qrels(queries, corpus, qrels) -> list[TrainPair]:
    """One training pair per positively judged (query, document)."""
    qpos = {qid: i for i, qid in enumerate(queries.ids)}
    dpos = {did: i for i, did in enumerate(corpus.ids)}
    pairs = []
    for qid in sorted(qrels):
        for did in sorted(qrels[qid]):
            if qrels[qid][did] <= 0:
                continue
            if qid not in qpos:
                raise ValueError(f"qrels query {qid!r} missing from query embeddings")
            if did not in dpos:
                raise ValueError(f"qrels document {did!r} missing from corpus embeddings")
            pairs.append(TrainPair(queries.vectors[qpos[qid]], corpus.vectors[dpos[did]], qid, did))
    return pairs


# ---------------------------------------------------------------------------
# loss


def contrastive_loss(q: np.ndarray, d: np.ndarray, temperature: float = 1.0):
    """In-batch-negative InfoNCE over refined batches.

    loss = -(1/B) sum_b log softmax_j(q_b . d_j / temperature)_b

    Returns (loss, dloss_dq, dloss_dd) with gradients in float64.
    """
    q = np.asarray(q)
    d = np.asarray(d)
    if q.ndim != 2 or q.shape != d.shape:
        raise DimensionMismatchError(f"batch shapes differ: {q.shape} vs {d.shape}")
    nb = q.shape[0]
    if nb == 0:
        raise ValueError("contrastive loss of an empty batch")
    if temperature <= 0.0:
        raise ValueError(f"temperature must be > 0, got {temperature}")

    q64 = q.astype(np.float64, copy=False)
    d64 = d.astype(np.float64, copy=False)
    s = kernels.dot_scores(q64, d64) / temperature
    s -= s.max(axis=1, keepdims=True)
    e = np.exp(s)
    lse = np.log(e.sum(axis=1))
    loss = float(np.mean(lse - np.diagonal(s)))

    p = e / e.sum(axis=1, keepdims=True)
    g = (p - np.eye(nb)) / nb
    dq = (g @ d64) / temperature
    dd = (g.T @ q64) / temperature
    return loss, dq, dd


# ---------------------------------------------------------------------------
# backward through the block


@dataclass
class BlockGrads:
    """Parameter gradients, mirroring the block's structure."""

    experts: list[ExpertParams]
    gate: GateParams

    def arrays(self):
        out = []
        for e in self.experts:
            out.extend([e.w_down, e.b_down, e.w_up, e.b_up])
        out.extend([self.gate.w_h, self.gate.b_h, self.gate.w_o, self.gate.b_o,
                    self.gate.noise_scale])
        return out


def zero_grads(block: MoEBlock) -> BlockGrads:
    experts = [
        ExpertParams(
            np.zeros_like(e.w_down), np.zeros_like(e.b_down),
            np.zeros_like(e.w_up), np.zeros_like(e.b_up),
        )
        for e in block.experts
    ]
    g = block.gate
    gate = GateParams(
        np.zeros_like(g.w_h), np.zeros_like(g.b_h),
        np.zeros_like(g.w_o), np.zeros_like(g.b_o), np.zeros_like(g.noise_scale),
    )
    return BlockGrads(experts, gate)


def add_grads_(dst: BlockGrads, src: BlockGrads) -> BlockGrads:
    for a, b in zip(dst.arrays(), src.arrays()):
        a += b
    return dst


def _expert_backward_into(grads, block, e, x_rows, z, a, dr):
    expert = block.experts[e]
    _, dw1, db1, dw2, db2 = kernels.mlp2_backward_batch(
        x_rows, z, a, dr, expert.w_down, expert.w_up, _ACT_IDS[block.activation]
    )
    ge = grads.experts[e]
    ge.w_down += dw1
    ge.b_down += db1
    ge.w_up += dw2
    ge.b_up += db2


def backward_block(record: RefineRecord, upstream: np.ndarray, block: MoEBlock) -> BlockGrads:
    """Exact parameter gradients for a recorded training-mode forward pass.

    Experts not routed to by a sample receive zero gradient from it; the
    argmax selection itself is treated as constant, so the noise-scale
    parameters have zero gradient (no load-balancing loss is implemented).
    """
    if record is None or record.x is None:
        raise ValueError("missing forward record")
    x = record.x
    upstream = np.asarray(upstream)
    if upstream.shape != x.shape:
        raise DimensionMismatchError(
            f"upstream shape {upstream.shape} does not match input {x.shape}"
        )
    grads = zero_grads(block)

    if record.mode == "noisy_top1":
        if record.scaled:
            up64 = upstream.astype(np.float64, copy=False)
            df = (record.p_sel.astype(np.float64)[:, None] * up64).astype(x.dtype)
        else:
            df = upstream.astype(x.dtype, copy=False)
        for e, idx, z, a in record.groups:
            _expert_backward_into(
                grads, block, e,
                np.ascontiguousarray(x[idx]), z, a, np.ascontiguousarray(df[idx]),
            )
        if record.scaled:
            # d loss / d p_sel, then through the clean softmax
            up64 = upstream.astype(np.float64, copy=False)
            dp = np.einsum("bi,bi->b", up64, record.f)
            probs64 = record.probs.astype(np.float64)
            onehot = np.zeros_like(probs64)
            onehot[np.arange(x.shape[0]), record.sel] = 1.0
            coeff = dp * record.p_sel.astype(np.float64)
            dlogits = (coeff[:, None] * (onehot - probs64)).astype(x.dtype)
            _, dwh, dbh, dwo, dbo = kernels.mlp2_backward_batch(
                x, record.gate_z, record.gate_a, np.ascontiguousarray(dlogits),
                block.gate.w_h, block.gate.w_o, _ACT_IDS["relu"],
            )
            grads.gate.w_h += dwh
            grads.gate.b_h += dbh
            grads.gate.w_o += dwo
            grads.gate.b_o += dbo
    elif record.mode == "random_top1":
        for e, idx, z, a in record.groups:
            _expert_backward_into(
                grads, block, e,
                np.ascontiguousarray(x[idx]), z, a, np.ascontiguousarray(upstream[idx]),
            )
    elif record.mode == "random_all":
        w64 = record.weights.astype(np.float64)
        up64 = upstream.astype(np.float64, copy=False)
        for e, (z, a) in enumerate(record.caches):
            dr = (w64[:, e:e + 1] * up64).astype(x.dtype)
            _expert_backward_into(grads, block, e, x, z, a, dr)
    else:
        raise ValueError(f"cannot backpropagate through record mode {record.mode!r}")
    return grads


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params: list[np.ndarray]) -> AdamState:
    return AdamState(
        step=0,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to the param arrays in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionMismatchError("params/grads/state length mismatch")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise DimensionMismatchError(
                f"param {i} shape {p.shape} does not match grad shape {g.shape}"
            )
        g64 = g.astype(np.float64, copy=False)
        m64 = beta1 * state.m[i].astype(np.float64) + (1.0 - beta1) * g64
        v64 = beta2 * state.v[i].astype(np.float64) + (1.0 - beta2) * g64 * g64
        update = lr * (m64 / bc1) / (np.sqrt(v64 / bc2) + eps)
        p[...] = (p.astype(np.float64) - update).astype(p.dtype)
        state.m[i][...] = m64.astype(state.m[i].dtype)
        state.v[i][...] = v64.astype(state.v[i].dtype)
    return state


# ---------------------------------------------------------------------------
# full pipeline step (shared by the train loop and the gradient oracle)


def pipeline_grads(block, qx, dx, noise_q, noise_d, temperature=1.0, scaled=True):
    """Forward + backward through refine -> contrastive loss for one batch."""
    yq, rec_q = noisy_top1_batch(qx, block, noise_q, scaled=scaled)
    yd, rec_d = noisy_top1_batch(dx, block, noise_d, scaled=scaled)
    loss, dq, dd = contrastive_loss(yq, yd, temperature)
    grads = backward_block(rec_q, dq.astype(qx.dtype), block)
    add_grads_(grads, backward_block(rec_d, dd.astype(dx.dtype), block))
    return loss, grads


def pipeline_loss(block, qx, dx, noise_q, noise_d, temperature=1.0, scaled=True):
    """Loss of the training pipeline with the noise fixed to the given draws."""
    yq, _ = noisy_top1_batch(qx, block, noise_q, scaled=scaled)
    yd, _ = noisy_top1_batch(dx, block, noise_d, scaled=scaled)
    loss, _, _ = contrastive_loss(yq, yd, temperature)
    return loss


# ---------------------------------------------------------------------------
# training loop


def split_validation(pairs: list[TrainPair], val_fraction: float, seed: int):
    """Seeded split by query: all pairs of a query land on the same side."""
    if len(pairs) < 2:
        raise ValueError("need at least 2 pairs to split")
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    qids = list(dict.fromkeys(p.query_id for p in pairs))
    if len(qids) < 2:
        raise ValueError("need at least 2 distinct queries to split by query")
    rng = make_rng(seed)
    perm = rng.permutation(len(qids))
    n_val = int(round(val_fraction * len(qids)))
    n_val = min(max(n_val, 1), len(qids) - 1)
    val_qids = {qids[i] for i in perm[:n_val]}
    train = [p for p in pairs if p.query_id not in val_qids]
    val = [p for p in pairs if p.query_id in val_qids]
    return train, val


def _validation_loss(block, qv, dv, cfg: TrainingConfig) -> float:
    """Deterministic, noise-free loss over the whole validation set."""
    if cfg.gate_mode == "random":
        # expectation surrogate: uniform weights over the experts
        w = np.full((qv.shape[0], block.n_experts), 1.0 / block.n_experts, dtype=qv.dtype)
        yq, _ = random_all_batch(qv, block, w)
        yd, _ = random_all_batch(dv, block, w)
    else:
        zeros = np.zeros((qv.shape[0], block.n_experts), dtype=qv.dtype)
        yq, _ = noisy_top1_batch(qv, block, zeros, scaled=cfg.scaled_gate)
        zeros_d = np.zeros((dv.shape[0], block.n_experts), dtype=dv.dtype)
        yd, _ = noisy_top1_batch(dv, block, zeros_d, scaled=cfg.scaled_gate)
    loss, _, _ = contrastive_loss(yq, yd, cfg.temperature)
    return loss


def train(config: TrainingConfig, pairs: list[TrainPair], block: MoEBlock):
    """Train a copy of the block; returns (best Checkpoint, epoch history).

    History rows are (epoch, train_loss, val_loss) for epochs 1..N; the best
    checkpoint is the post-epoch state with the lowest validation loss (the
    earliest such epoch on ties). Base embeddings are never modified.
    """
    config.validate()
    if not pairs:
        raise ValueError("no training pairs")
    dim = pairs[0].query.shape[0]
    if dim != block.dim:
        raise DimensionMismatchError(
            f"pair dimension {dim} does not match block dimension {block.dim}"
        )

    work = block.copy()
    dtype = work.dtype
    n = work.n_experts
    train_pairs, val_pairs = split_validation(pairs, config.val_fraction, config.seed)
    q_tr = np.stack([p.query for p in train_pairs]).astype(dtype)
    d_tr = np.stack([p.doc for p in train_pairs]).astype(dtype)
    q_val = np.stack([p.query for p in val_pairs]).astype(dtype)
    d_val = np.stack([p.doc for p in val_pairs]).astype(dtype)

    if config.epochs == 0:
        return Checkpoint(work, 0, _validation_loss(work, q_val, d_val, config)), []

    rng = make_rng(config.seed)
    state = adam_init(work.param_arrays())
    history = []
    best: Checkpoint | None = None

    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(train_pairs))
        loss_sum = 0.0
        for start in range(0, len(train_pairs), config.batch_size):
            idx = perm[start:start + config.batch_size]
            qx = np.ascontiguousarray(q_tr[idx])
            dx = np.ascontiguousarray(d_tr[idx])
            nb = len(idx)
            if config.gate_mode == "learned":
                noise_q = rng.standard_normal((nb, n)).astype(dtype)
                noise_d = rng.standard_normal((nb, n)).astype(dtype)
                loss, grads = pipeline_grads(
                    work, qx, dx, noise_q, noise_d, config.temperature, config.scaled_gate
                )
            elif config.random_variant == "all":
                wq = softmax_rows(rng.standard_normal((nb, n))).astype(dtype)
                wd = softmax_rows(rng.standard_normal((nb, n))).astype(dtype)
                yq, rec_q = random_all_batch(qx, work, wq)
                yd, rec_d = random_all_batch(dx, work, wd)
                loss, dq, dd = contrastive_loss(yq, yd, config.temperature)
                grads = backward_block(rec_q, dq.astype(dtype), work)
                add_grads_(grads, backward_block(rec_d, dd.astype(dtype), work))
            else:
                sel_q = rng.integers(0, n, size=nb)
                sel_d = rng.integers(0, n, size=nb)
                yq, rec_q = random_top1_batch(qx, work, sel_q)
                yd, rec_d = random_top1_batch(dx, work, sel_d)
                loss, dq, dd = contrastive_loss(yq, yd, config.temperature)
                grads = backward_block(rec_q, dq.astype(dtype), work)
                add_grads_(grads, backward_block(rec_d, dd.astype(dtype), work))
            adam_step(
                work.param_arrays(), grads.arrays(), state,
                config.lr, config.beta1, config.beta2, config.eps,
            )
            loss_sum += loss * nb
        train_loss = loss_sum / len(train_pairs)
        val_loss = _validation_loss(work, q_val, d_val, config)
        history.append((epoch, train_loss, val_loss))
        if best is None or val_loss < best.val_loss:
            best = Checkpoint(work.copy(), epoch, val_loss)
    return best, history


def write_loss_log(history, path) -> None:
    """Epoch losses as TSV: epoch, train_loss, val_loss."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch\ttrain_loss\tval_loss\n")
        for epoch, train_loss, val_loss in history:
            fh.write(f"{epoch}\t{train_loss:.8f}\t{val_loss:.8f}\n")
