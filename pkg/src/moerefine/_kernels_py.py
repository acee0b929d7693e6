"""NumPy implementation of the numeric kernels.

This module is the readable reference for the compiled extension in
``_kernels_c.pyx``; both expose the same three functions with the same
contract:

* inputs are C-contiguous arrays of one floating dtype (float32 or float64),
* every dot product accumulates in float64,
* intermediates are rounded to the working dtype stage by stage (hidden
  pre-activation, hidden activation, output), so both backends observe
  identically rounded tensors.

The two implementations can differ in the last ulp because summation order
is not pinned; callers must not rely on bit equality across backends.
"""

import numpy as np
from scipy.special import erf

ACT_RELU = 0
ACT_GELU = 1

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _act(z, act_id):
    if act_id == ACT_RELU:
        return np.maximum(z, 0.0)
    return 0.5 * z * (1.0 + erf(z * _INV_SQRT2))


def _dact(z, act_id):
    if act_id == ACT_RELU:
        return (z > 0.0).astype(np.float64)
    return 0.5 * (1.0 + erf(z * _INV_SQRT2)) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def mlp2_forward_batch(x, w1, b1, w2, b2, act_id):
    """Two-layer MLP on a row batch: out = act(x @ w1.T + b1) @ w2.T + b2.

    Returns (out, z, a) where z is the hidden pre-activation and a the hidden
    activation, both needed by the backward pass.
    """
    dt = x.dtype
    x64 = x.astype(np.float64, copy=False)
    z = (x64 @ w1.astype(np.float64, copy=False).T + b1.astype(np.float64, copy=False)).astype(dt)
    a = _act(z.astype(np.float64, copy=False), act_id).astype(dt)
    out = (
        a.astype(np.float64, copy=False) @ w2.astype(np.float64, copy=False).T
        + b2.astype(np.float64, copy=False)
    ).astype(dt)
    return out, z, a


def mlp2_backward_batch(x, z, a, dout, w1, w2, act_id):
    """Gradients of mlp2_forward_batch given upstream dout.

    Returns (dx, dw1, db1, dw2, db2) in the dtype of x.
    """
    dt = x.dtype
    x64 = x.astype(np.float64, copy=False)
    z64 = z.astype(np.float64, copy=False)
    a64 = a.astype(np.float64, copy=False)
    g64 = dout.astype(np.float64, copy=False)
    w1_64 = w1.astype(np.float64, copy=False)
    w2_64 = w2.astype(np.float64, copy=False)

    dz = (g64 @ w2_64) * _dact(z64, act_id)
    dw2 = g64.T @ a64
    db2 = g64.sum(axis=0)
    dw1 = dz.T @ x64
    db1 = dz.sum(axis=0)
    dx = dz @ w1_64
    return (
        dx.astype(dt),
        dw1.astype(dt),
        db1.astype(dt),
        dw2.astype(dt),
        db2.astype(dt),
    )


def dot_scores(q, c):
    """All-pairs dot products, float64 result: scores[i, j] = q[i] . c[j]."""
    return q.astype(np.float64, copy=False) @ c.astype(np.float64, copy=False).T
