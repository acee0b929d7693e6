# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled numeric kernels.

Same contract as ``_kernels_py`` (the readable reference): float64
accumulation, intermediates rounded to the working dtype stage by stage.
"""

import numpy as np

from libc.math cimport erf, exp

ctypedef fused floating:
    float
    double

ACT_RELU = 0
ACT_GELU = 1

cdef double _INV_SQRT2 = 0.7071067811865475244
cdef double _INV_SQRT_2PI = 0.3989422804014326779


cdef inline double _act(double z, int act_id) noexcept nogil:
    if act_id == 0:
        return z if z > 0.0 else 0.0
    return 0.5 * z * (1.0 + erf(z * _INV_SQRT2))


cdef inline double _dact(double z, int act_id) noexcept nogil:
    if act_id == 0:
        return 1.0 if z > 0.0 else 0.0
    return 0.5 * (1.0 + erf(z * _INV_SQRT2)) + z * _INV_SQRT_2PI * exp(-0.5 * z * z)


def mlp2_forward_batch(floating[:, ::1] x, floating[:, ::1] w1, floating[::1] b1,
                       floating[:, ::1] w2, floating[::1] b2, int act_id):
    cdef Py_ssize_t nb = x.shape[0]
    cdef Py_ssize_t nin = x.shape[1]
    cdef Py_ssize_t nh = w1.shape[0]
    cdef Py_ssize_t nout = w2.shape[0]

    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.empty((nb, nout), dtype=dtype)
    z_arr = np.empty((nb, nh), dtype=dtype)
    a_arr = np.empty((nb, nh), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef floating[:, ::1] z = z_arr
    cdef floating[:, ::1] a = a_arr

    cdef Py_ssize_t b, i, j, k
    cdef double acc
    with nogil:
        for b in range(nb):
            for j in range(nh):
                acc = <double> b1[j]
                for k in range(nin):
                    acc += (<double> x[b, k]) * (<double> w1[j, k])
                z[b, j] = <floating> acc
                a[b, j] = <floating> _act(<double> z[b, j], act_id)
            for i in range(nout):
                acc = <double> b2[i]
                for j in range(nh):
                    acc += (<double> a[b, j]) * (<double> w2[i, j])
                out[b, i] = <floating> acc
    return out_arr, z_arr, a_arr


def mlp2_backward_batch(floating[:, ::1] x, floating[:, ::1] z, floating[:, ::1] a,
                        floating[:, ::1] dout, floating[:, ::1] w1, floating[:, ::1] w2,
                        int act_id):
    cdef Py_ssize_t nb = x.shape[0]
    cdef Py_ssize_t nin = x.shape[1]
    cdef Py_ssize_t nh = w1.shape[0]
    cdef Py_ssize_t nout = w2.shape[0]

    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    dx_arr = np.empty((nb, nin), dtype=dtype)
    # parameter gradients accumulate over the batch in float64 buffers
    dw1_arr = np.zeros((nh, nin), dtype=np.float64)
    db1_arr = np.zeros(nh, dtype=np.float64)
    dw2_arr = np.zeros((nout, nh), dtype=np.float64)
    db2_arr = np.zeros(nout, dtype=np.float64)
    dz_arr = np.empty(nh, dtype=np.float64)

    cdef floating[:, ::1] dx = dx_arr
    cdef double[:, ::1] dw1 = dw1_arr
    cdef double[::1] db1 = db1_arr
    cdef double[:, ::1] dw2 = dw2_arr
    cdef double[::1] db2 = db2_arr
    cdef double[::1] dz = dz_arr

    cdef Py_ssize_t b, i, j, k
    cdef double acc, g
    with nogil:
        for b in range(nb):
            for j in range(nh):
                acc = 0.0
                for i in range(nout):
                    acc += (<double> dout[b, i]) * (<double> w2[i, j])
                dz[j] = acc * _dact(<double> z[b, j], act_id)
            for i in range(nout):
                g = <double> dout[b, i]
                db2[i] += g
                for j in range(nh):
                    dw2[i, j] += g * (<double> a[b, j])
            for j in range(nh):
                db1[j] += dz[j]
                for k in range(nin):
                    dw1[j, k] += dz[j] * (<double> x[b, k])
            for k in range(nin):
                acc = 0.0
                for j in range(nh):
                    acc += dz[j] * (<double> w1[j, k])
                dx[b, k] = <floating> acc

    return (
        dx_arr,
        dw1_arr.astype(dtype, copy=False),
        db1_arr.astype(dtype, copy=False),
        dw2_arr.astype(dtype, copy=False),
        db2_arr.astype(dtype, copy=False),
    )


def dot_scores(floating[:, ::1] q, floating[:, ::1] c):
    cdef Py_ssize_t m = q.shape[0]
    cdef Py_ssize_t n = c.shape[0]
    cdef Py_ssize_t d = q.shape[1]

    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double acc
    with nogil:
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for k in range(d):
                    acc += (<double> q[i, k]) * (<double> c[j, k])
                out[i, j] = acc
    return out_arr
