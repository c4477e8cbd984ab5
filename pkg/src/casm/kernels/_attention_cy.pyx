# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled attention and scatter kernels.

Same contracts as casm.kernels._reference; fused masked softmax exploits
causality (keys j > t are never touched) and left-padding, so it does about
half the work of the dense path and allocates no [L, L] mask temporaries.
"""

import numpy as np

cimport cython
from cython.parallel cimport prange
from libc.math cimport exp, sqrt


ctypedef fused real:
    float
    double


def attention_forward(real[:, :, :, ::1] q, real[:, :, :, ::1] k,
                      real[:, :, :, ::1] v, const unsigned char[:, ::1] key_mask):
    cdef Py_ssize_t B = q.shape[0], H = q.shape[1], L = q.shape[2], dh = q.shape[3]
    dtype = np.float32 if real is float else np.float64
    probs_arr = np.zeros((B, H, L, L), dtype=dtype)
    ctx_arr = np.zeros((B, H, L, dh), dtype=dtype)
    cdef real[:, :, :, ::1] probs = probs_arr
    cdef real[:, :, :, ::1] ctx = ctx_arr
    cdef real scale = <real>(1.0 / sqrt(<double>dh))
    cdef Py_ssize_t bh, b, h, t, j, x, cnt
    cdef real s, maxlog, tot, inv, acc

    with nogil:
        for bh in prange(B * H, schedule="static"):
            b = bh // H
            h = bh % H
            for t in range(L):
                if not key_mask[b, t]:
                    continue  # left padding: no visible key, row stays zero
                maxlog = 0
                cnt = 0
                for j in range(t + 1):
                    if not key_mask[b, j]:
                        continue
                    s = 0
                    for x in range(dh):
                        s = s + q[b, h, t, x] * k[b, h, j, x]
                    s = s * scale
                    probs[b, h, t, j] = s
                    if cnt == 0 or s > maxlog:
                        maxlog = s
                    cnt = cnt + 1
                if cnt == 0:
                    continue
                tot = 0
                for j in range(t + 1):
                    if key_mask[b, j]:
                        s = <real>exp(<double>(probs[b, h, t, j] - maxlog))
                        probs[b, h, t, j] = s
                        tot = tot + s
                inv = <real>1.0 / tot
                for j in range(t + 1):
                    if key_mask[b, j]:
                        probs[b, h, t, j] = probs[b, h, t, j] * inv
                for x in range(dh):
                    acc = 0
                    for j in range(t + 1):
                        acc = acc + probs[b, h, t, j] * v[b, h, j, x]
                    ctx[b, h, t, x] = acc
    return probs_arr, ctx_arr


def attention_backward(real[:, :, :, ::1] d_ctx, real[:, :, :, ::1] probs,
                       real[:, :, :, ::1] q, real[:, :, :, ::1] k,
                       real[:, :, :, ::1] v, const unsigned char[:, ::1] key_mask):
    cdef Py_ssize_t B = q.shape[0], H = q.shape[1], L = q.shape[2], dh = q.shape[3]
    dtype = np.float32 if real is float else np.float64
    dq_arr = np.zeros((B, H, L, dh), dtype=dtype)
    dk_arr = np.zeros((B, H, L, dh), dtype=dtype)
    dv_arr = np.zeros((B, H, L, dh), dtype=dtype)
    scratch_arr = np.zeros((B * H, L), dtype=dtype)
    cdef real[:, :, :, ::1] dq = dq_arr
    cdef real[:, :, :, ::1] dk = dk_arr
    cdef real[:, :, :, ::1] dv = dv_arr
    cdef real[:, ::1] dlogit = scratch_arr
    cdef real scale = <real>(1.0 / sqrt(<double>dh))
    cdef Py_ssize_t bh, b, h, t, j, x
    cdef real dp, inner, g

    with nogil:
        for bh in prange(B * H, schedule="static"):
            b = bh // H
            h = bh % H
            for t in range(L):
                if not key_mask[b, t]:
                    continue
                # d_probs restricted to visible keys, then softmax backward
                inner = 0
                for j in range(t + 1):
                    if not key_mask[b, j]:
                        continue
                    dp = 0
                    for x in range(dh):
                        dp = dp + d_ctx[b, h, t, x] * v[b, h, j, x]
                    dlogit[bh, j] = dp
                    inner = inner + probs[b, h, t, j] * dp
                for j in range(t + 1):
                    if key_mask[b, j]:
                        dlogit[bh, j] = probs[b, h, t, j] * (dlogit[bh, j] - inner)
                for j in range(t + 1):
                    if not key_mask[b, j]:
                        continue
                    g = dlogit[bh, j] * scale
                    for x in range(dh):
                        dq[b, h, t, x] = dq[b, h, t, x] + g * k[b, h, j, x]
                        dk[b, h, j, x] = dk[b, h, j, x] + g * q[b, h, t, x]
                        dv[b, h, j, x] = dv[b, h, j, x] + probs[b, h, t, j] * d_ctx[b, h, t, x]
    return dq_arr, dk_arr, dv_arr


def scatter_rows_add(real[:, ::1] table, ids, real[:, ::1] rows):
    cdef Py_ssize_t[::1] idx = np.ascontiguousarray(ids, dtype=np.intp)
    cdef Py_ssize_t n = idx.shape[0], d = table.shape[1]
    cdef Py_ssize_t i, x, r
    with nogil:
        for i in range(n):
            r = idx[i]
            for x in range(d):
                table[r, x] += rows[i, x]
