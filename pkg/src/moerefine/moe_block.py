"""Single-block mixture-of-experts refinement of embedding vectors.

The block holds n parallel experts and one gating network and is shared by
queries and documents. Each expert is a bottleneck feed-forward net with a
residual skip: the input dimension d is halved (hidden width ceil(d/2)),
projected back up to d, and added to the input. The gate is a two-layer net
(hidden width ceil(d/2), ReLU) emitting one suitability logit per expert.

Pooling turns the per-expert outputs into one refined embedding:

* ``top1``   - apply only the highest-gated expert (no gate scaling),
* ``all``    - softmax-weighted sum of all expert outputs,
* ``random-top1`` / ``random-all`` - the random-gate ablations, replacing the
  learned gate with a uniformly drawn expert or random softmax weights.

Training-time routing adds Gaussian noise to the gate logits (scaled by a
learnable per-expert softplus parameter) so that every expert is explored,
and multiplies the selected expert's output by its clean softmax probability
so the gate receives gradient. An unscaled variant is available for
comparison.

Internally the residual branch is kept separate from the skip connection and
summed in float64, so a block whose up-projection is all zero refines any
input to itself bit for bit.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels
from .exceptions import BadHeaderError, DimensionMismatchError, TruncatedFileError
from .numerics import argmax_rows_tiebreak, make_rng, softmax_rows, softplus

ACTIVATIONS = ("relu", "gelu")
POOLING_MODES = ("top1", "all", "random-top1", "random-all")

_ACT_IDS = {"relu": 0, "gelu": 1}
_POOL_IDS = {m: i for i, m in enumerate(POOLING_MODES)}

CHECKPOINT_MAGIC = b"SBMO"
CHECKPOINT_VERSION = 1

# softplus(NOISE_SCALE_INIT) == 1
NOISE_SCALE_INIT = float(np.log(np.e - 1.0))


def hidden_width(dim: int) -> int:
    """Bottleneck width: input dimension halved, rounded up for odd d."""
    return (dim + 1) // 2


@dataclass
class ExpertParams:
    """One bottleneck expert. Weight layout is (out_features, in_features)."""

    w_down: np.ndarray  # (hidden, dim)
    b_down: np.ndarray  # (hidden,)
    w_up: np.ndarray    # (dim, hidden)
    b_up: np.ndarray    # (dim,)


@dataclass
class GateParams:
    """Gating network plus the learnable noise scale for noisy routing."""

    w_h: np.ndarray          # (hidden, dim)
    b_h: np.ndarray          # (hidden,)
    w_o: np.ndarray          # (n_experts, hidden)
    b_o: np.ndarray          # (n_experts,)
    noise_scale: np.ndarray  # (n_experts,)


@dataclass
class MoEBlock:
    experts: list[ExpertParams]
    gate: GateParams
    dim: int
    activation: str = "relu"
    pooling: str = "top1"

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def hidden(self) -> int:
        return hidden_width(self.dim)

    @property
    def dtype(self):
        return self.experts[0].w_down.dtype

    def param_arrays(self):
        """All parameter arrays in canonical (checkpoint) order."""
        out = []
        for e in self.experts:
            out.extend([e.w_down, e.b_down, e.w_up, e.b_up])
        g = self.gate
        out.extend([g.w_h, g.b_h, g.w_o, g.b_o, g.noise_scale])
        return out

    def copy(self) -> "MoEBlock":
        return self.astype(self.dtype)

    def astype(self, dtype) -> "MoEBlock":
        experts = [
            ExpertParams(
                e.w_down.astype(dtype), e.b_down.astype(dtype),
                e.w_up.astype(dtype), e.b_up.astype(dtype),
            )
            for e in self.experts
        ]
        g = self.gate
        gate = GateParams(
            g.w_h.astype(dtype), g.b_h.astype(dtype),
            g.w_o.astype(dtype), g.b_o.astype(dtype),
            g.noise_scale.astype(dtype),
        )
        return MoEBlock(experts, gate, self.dim, self.activation, self.pooling)


def init_block(dim: int, n_experts: int, seed: int, activation: str = "relu",
               pooling: str = "top1", scheme: str = "near_identity") -> MoEBlock:
    """Seeded block initialization.

    Down-projection and gate weights are Gaussian scaled by 1/sqrt(fan_in);
    up-projections and all biases start at zero, so a fresh block is exactly
    the identity map and training starts from the unrefined baseline.
    """
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    if n_experts < 1:
        raise ValueError(f"n_experts must be >= 1, got {n_experts}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if pooling not in POOLING_MODES:
        raise ValueError(f"unknown pooling mode {pooling!r}")
    if scheme != "near_identity":
        raise ValueError(f"unknown init scheme {scheme!r}")

    h = hidden_width(dim)
    rng = make_rng(seed)
    f32 = np.float32

    experts = []
    for _ in range(n_experts):
        w_down = (rng.standard_normal((h, dim)) / np.sqrt(dim)).astype(f32)
        experts.append(
            ExpertParams(
                w_down=w_down,
                b_down=np.zeros(h, dtype=f32),
                w_up=np.zeros((dim, h), dtype=f32),
                b_up=np.zeros(dim, dtype=f32),
            )
        )
    gate = GateParams(
        w_h=(rng.standard_normal((h, dim)) / np.sqrt(dim)).astype(f32),
        b_h=np.zeros(h, dtype=f32),
        w_o=(rng.standard_normal((n_experts, h)) / np.sqrt(h)).astype(f32),
        b_o=np.zeros(n_experts, dtype=f32),
        noise_scale=np.full(n_experts, NOISE_SCALE_INIT, dtype=f32),
    )
    return MoEBlock(experts, gate, dim, activation, pooling)


def _check_rows(x: np.ndarray, dim: int) -> np.ndarray:
    x = np.ascontiguousarray(x)
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimensionMismatchError(
            f"expected rows of dimension {dim}, got shape {x.shape}"
        )
    return x


# ---------------------------------------------------------------------------
# forward passes


def expert_residual_batch(x: np.ndarray, expert: ExpertParams, activation: str):
    """Residual branch w_up . act(w_down . x + b_down) + b_up for each row.

    Returns (r, z, a); the caller adds the skip connection.
    """
    act_id = _ACT_IDS[activation]
    return kernels.mlp2_forward_batch(
        x, expert.w_down, expert.b_down, expert.w_up, expert.b_up, act_id
    )


def gate_logits_batch(x: np.ndarray, gate: GateParams):
    """Gate logits for each row; hidden activation is ReLU."""
    return kernels.mlp2_forward_batch(
        x, gate.w_h, gate.b_h, gate.w_o, gate.b_o, _ACT_IDS["relu"]
    )


def expert_forward(x: np.ndarray, expert: ExpertParams, activation: str = "relu") -> np.ndarray:
    """f_i(x) = x + up(act(down(x))): one expert applied to one vector."""
    x = np.asarray(x)
    if x.ndim != 1 or x.shape[0] != expert.w_down.shape[1]:
        raise DimensionMismatchError(
            f"expected vector of dimension {expert.w_down.shape[1]}, got shape {x.shape}"
        )
    r, _, _ = expert_residual_batch(np.ascontiguousarray(x[None, :]), expert, activation)
    y = x.astype(np.float64) + r[0].astype(np.float64)
    return y.astype(x.dtype)


def gate_logits(x: np.ndarray, gate: GateParams) -> np.ndarray:
    """Per-expert suitability logits for one vector."""
    x = np.asarray(x)
    if x.ndim != 1 or x.shape[0] != gate.w_h.shape[1]:
        raise DimensionMismatchError(
            f"expected vector of dimension {gate.w_h.shape[1]}, got shape {x.shape}"
        )
    logits, _, _ = gate_logits_batch(np.ascontiguousarray(x[None, :]), gate)
    return logits[0]


def _routed_residuals(x: np.ndarray, block: MoEBlock, sel: np.ndarray):
    """Residual branch of the selected expert per row.

    Returns (r64, groups) where r64 is float64 (rows, dim) and groups is a
    list of (expert_index, row_indices, z, a) caches for the backward pass.
    """
    r64 = np.zeros((x.shape[0], block.dim), dtype=np.float64)
    groups = []
    for e in np.unique(sel):
        idx = np.flatnonzero(sel == e)
        r, z, a = expert_residual_batch(
            np.ascontiguousarray(x[idx]), block.experts[int(e)], block.activation
        )
        r64[idx] = r
        groups.append((int(e), idx, z, a))
    return r64, groups


def _weighted_residuals(x: np.ndarray, block: MoEBlock, weights64: np.ndarray):
    """Sum of per-expert residual branches weighted per row (float64)."""
    acc = np.zeros((x.shape[0], block.dim), dtype=np.float64)
    caches = []
    for e, expert in enumerate(block.experts):
        r, z, a = expert_residual_batch(x, expert, block.activation)
        acc += weights64[:, e:e + 1] * r.astype(np.float64)
        caches.append((z, a))
    return acc, caches


def pool_top1(x: np.ndarray, block: MoEBlock):
    """Apply the highest-gated expert; returns (y, selected_expert)."""
    y, routing = refine_batch(np.asarray(x)[None, :], block, mode="top1")
    return y[0], int(routing[0])


def pool_all(x: np.ndarray, block: MoEBlock):
    """Softmax-weighted sum over all experts; returns (y, weights)."""
    y, routing = refine_batch(np.asarray(x)[None, :], block, mode="all")
    return y[0], routing[0]


def random_gate(x: np.ndarray, block: MoEBlock, rng: np.random.Generator,
                variant: str = "all") -> np.ndarray:
    """Random-gate ablation: random softmax weights (``all``) or a uniformly
    drawn expert (``top1``) instead of the learned gate."""
    mode = {"all": "random-all", "top1": "random-top1"}[variant]
    y, _ = refine_batch(np.asarray(x)[None, :], block, mode=mode, rng=rng)
    return y[0]


def noisy_top1_train(x: np.ndarray, block: MoEBlock, rng: np.random.Generator,
                     scaled: bool = True):
    """Training-time routing for one vector: perturb logits with Gaussian
    noise, pick the top expert, scale its output by the clean softmax
    probability (unless ``scaled`` is off).

    Returns (y, selected, p_selected).
    """
    x = np.asarray(x)
    noise = rng.standard_normal((1, block.n_experts)).astype(x.dtype)
    y, rec = noisy_top1_batch(np.ascontiguousarray(x[None, :]), block, noise, scaled=scaled)
    return y[0], int(rec.sel[0]), float(rec.p_sel[0])


def refine_batch(x: np.ndarray, block: MoEBlock, mode: str | None = None,
                 rng: np.random.Generator | None = None):
    """Row-wise inference refinement.

    Returns (y, routing): routing is the selected expert per row for the
    top1 modes and the per-row weight vector for the all modes.
    """
    mode = mode or block.pooling
    if mode not in POOLING_MODES:
        raise ValueError(f"unknown pooling mode {mode!r}")
    x = _check_rows(x, block.dim)
    nb = x.shape[0]
    n = block.n_experts

    if nb == 0:
        if mode in ("top1", "random-top1"):
            return x.copy(), np.zeros(0, dtype=np.int64)
        return x.copy(), np.zeros((0, n), dtype=x.dtype)

    x64 = x.astype(np.float64, copy=False)
    if mode == "top1":
        logits, _, _ = gate_logits_batch(x, block.gate)
        sel = argmax_rows_tiebreak(logits)
        r64, _ = _routed_residuals(x, block, sel)
        return (x64 + r64).astype(x.dtype), sel
    if mode == "random-top1":
        if rng is None:
            raise ValueError("random-top1 mode needs an rng")
        sel = rng.integers(0, n, size=nb)
        r64, _ = _routed_residuals(x, block, sel)
        return (x64 + r64).astype(x.dtype), sel
    if mode == "all":
        logits, _, _ = gate_logits_batch(x, block.gate)
        weights = softmax_rows(logits)
    else:  # random-all
        if rng is None:
            raise ValueError("random-all mode needs an rng")
        weights = softmax_rows(rng.standard_normal((nb, n))).astype(x.dtype)
    acc, _ = _weighted_residuals(x, block, weights.astype(np.float64))
    return (x64 + acc).astype(x.dtype), weights


# ---------------------------------------------------------------------------
# training-mode forward with recorded activations


@dataclass
class RefineRecord:
    """Activations and routing recorded by a training-mode forward pass."""

    mode: str                      # noisy_top1 | random_top1 | random_all
    x: np.ndarray
    scaled: bool = False
    gate_z: np.ndarray | None = None
    gate_a: np.ndarray | None = None
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None
    sel: np.ndarray | None = None
    p_sel: np.ndarray | None = None
    f: np.ndarray | None = None    # pre-scaling expert output x + r (float64)
    groups: list = field(default_factory=list)
    weights: np.ndarray | None = None
    caches: list = field(default_factory=list)


def noisy_top1_batch(x: np.ndarray, block: MoEBlock, noise: np.ndarray,
                     scaled: bool = True):
    """Noisy top-1 routing over a row batch with recorded activations.

    noise has shape (rows, n_experts); it perturbs the logits scaled by
    softplus(noise_scale). The clean-logit softmax probability of the chosen
    expert scales the output when ``scaled`` is on.
    """
    x = _check_rows(x, block.dim)
    if noise.shape != (x.shape[0], block.n_experts):
        raise DimensionMismatchError(
            f"noise shape {noise.shape} does not match ({x.shape[0]}, {block.n_experts})"
        )
    logits, gz, ga = gate_logits_batch(x, block.gate)
    sp = softplus(block.gate.noise_scale.astype(np.float64))
    noisy = logits.astype(np.float64) + noise.astype(np.float64) * sp
    sel = argmax_rows_tiebreak(noisy)
    probs = softmax_rows(logits)
    p_sel = probs[np.arange(x.shape[0]), sel]

    r64, groups = _routed_residuals(x, block, sel)
    f64 = x.astype(np.float64, copy=False) + r64
    if scaled:
        y = (p_sel.astype(np.float64)[:, None] * f64).astype(x.dtype)
    else:
        y = f64.astype(x.dtype)
    rec = RefineRecord(
        mode="noisy_top1", x=x, scaled=scaled, gate_z=gz, gate_a=ga,
        logits=logits, probs=probs, sel=sel, p_sel=p_sel, f=f64, groups=groups,
    )
    return y, rec


def random_top1_batch(x: np.ndarray, block: MoEBlock, sel: np.ndarray):
    """Training forward with a caller-supplied random expert per row."""
    x = _check_rows(x, block.dim)
    r64, groups = _routed_residuals(x, block, sel)
    y = (x.astype(np.float64, copy=False) + r64).astype(x.dtype)
    rec = RefineRecord(mode="random_top1", x=x, sel=sel, groups=groups)
    return y, rec


def random_all_batch(x: np.ndarray, block: MoEBlock, weights: np.ndarray):
    """Training forward with caller-supplied per-row expert weights."""
    x = _check_rows(x, block.dim)
    if weights.shape != (x.shape[0], block.n_experts):
        raise DimensionMismatchError(
            f"weights shape {weights.shape} does not match ({x.shape[0]}, {block.n_experts})"
        )
    acc, caches = _weighted_residuals(x, block, weights.astype(np.float64))
    y = (x.astype(np.float64, copy=False) + acc).astype(x.dtype)
    rec = RefineRecord(mode="random_all", x=x, weights=weights, caches=caches)
    return y, rec


# ---------------------------------------------------------------------------
# checkpoint format
#
# Binary layout, all little-endian:
#   bytes 0-3   magic "SBMO"
#   u32         format version (1)
#   u32         embedding dimension d
#   u32         number of experts n
#   u32         activation id (0 relu, 1 gelu)
#   u32         pooling id (0 top1, 1 all, 2 random-top1, 3 random-all)
#   f32 arrays  per expert: w_down (h x d), b_down (h), w_up (d x h), b_up (d)
#               then gate: w_h (h x d), b_h (h), w_o (n x h), b_o (n),
#               noise_scale (n); row-major.


def serialize_block(block: MoEBlock) -> bytes:
    header = CHECKPOINT_MAGIC + struct.pack(
        "<IIIII",
        CHECKPOINT_VERSION,
        block.dim,
        block.n_experts,
        _ACT_IDS[block.activation],
        _POOL_IDS[block.pooling],
    )
    parts = [header]
    for arr in block.param_arrays():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def deserialize_block(data: bytes) -> MoEBlock:
    if len(data) < 24 or data[:4] != CHECKPOINT_MAGIC:
        raise BadHeaderError("not a checkpoint file (bad magic)")
    version, dim, n, act_id, pool_id = struct.unpack("<IIIII", data[4:24])
    if version != CHECKPOINT_VERSION:
        raise BadHeaderError(f"unsupported checkpoint version {version}")
    try:
        activation = ACTIVATIONS[act_id]
        pooling = POOLING_MODES[pool_id]
    except IndexError:
        raise BadHeaderError(f"unknown activation/pooling ids {act_id}/{pool_id}")

    h = hidden_width(dim)
    shapes = []
    for _ in range(n):
        shapes.extend([(h, dim), (h,), (dim, h), (dim,)])
    shapes.extend([(h, dim), (h,), (n, h), (n,), (n,)])

    need = 24 + sum(int(np.prod(s)) for s in shapes) * 4
    if len(data) < need:
        raise TruncatedFileError(
            f"checkpoint truncated: need {need} bytes, have {len(data)}"
        )
    if len(data) > need:
        raise BadHeaderError(f"checkpoint has {len(data) - need} trailing bytes")

    off = 24
    arrays = []
    for s in shapes:
        count = int(np.prod(s))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(s).copy()
        if not np.all(np.isfinite(arr)):
            raise BadHeaderError("checkpoint contains non-finite parameters")
        arrays.append(arr)
        off += count * 4

    experts = []
    for i in range(n):
        experts.append(ExpertParams(*arrays[4 * i:4 * i + 4]))
    gate = GateParams(*arrays[4 * n:])
    return MoEBlock(experts, gate, dim, activation, pooling)


def save_checkpoint(block: MoEBlock, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_block(block))


def load_checkpoint(path) -> MoEBlock:
    with open(path, "rb") as fh:
        return deserialize_block(fh.read())


def block_fingerprint(block: MoEBlock) -> str:
    """SHA-256 of the serialized checkpoint bytes."""
    return hashlib.sha256(serialize_block(block)).hexdigest()
