# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled single-pass kernels for the attention head's inference path."""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp

cnp.import_array()


def assign_aggregate(const floating[:, ::1] x, const floating[:, ::1] f, const floating[:, ::1] w_cluster,
                     const floating[::1] b_cluster, const floating[::1] tau, int n_heads, double eps):
    cdef Py_ssize_t n_rows = x.shape[0]
    cdef Py_ssize_t inner = x.shape[1]
    cdef Py_ssize_t dh = inner // n_heads
    cdef Py_ssize_t m_count = w_cluster.shape[1]
    cdef Py_ssize_t n, h, m, d, off
    cdef double acc, top, total, wv, inv_tau

    dtype = np.float32 if floating is float else np.float64
    w_arr = np.empty((n_heads, n_rows, m_count), dtype=dtype)
    mass_acc = np.zeros((n_heads, m_count), dtype=np.float64)
    tok_acc = np.zeros((n_heads, m_count, dh), dtype=np.float64)
    logits_arr = np.empty(m_count, dtype=np.float64)
    cdef floating[:, :, ::1] w = w_arr
    cdef double[:, ::1] mass = mass_acc
    cdef double[:, :, ::1] tok = tok_acc
    cdef double[::1] logits = logits_arr

    with nogil:
        for n in range(n_rows):
            for h in range(n_heads):
                off = h * dh
                inv_tau = 1.0 / tau[h]
                top = -1e308
                for m in range(m_count):
                    acc = b_cluster[m]
                    for d in range(dh):
                        acc = acc + x[n, off + d] * w_cluster[d, m]
                    acc = acc * inv_tau
                    logits[m] = acc
                    if acc > top:
                        top = acc
                total = 0.0
                for m in range(m_count):
                    logits[m] = exp(logits[m] - top)
                    total = total + logits[m]
                for m in range(m_count):
                    wv = logits[m] / total
                    w[h, n, m] = <floating>wv
                    mass[h, m] = mass[h, m] + wv
                    for d in range(dh):
                        tok[h, m, d] = tok[h, m, d] + wv * f[n, off + d]
        for h in range(n_heads):
            for m in range(m_count):
                for d in range(dh):
                    tok[h, m, d] = tok[h, m, d] / (mass[h, m] + eps)

    return w_arr, tok_acc.astype(dtype), mass_acc.astype(dtype)


def broadcast(const floating[:, :, ::1] w, const floating[:, :, ::1] tokens):
    cdef Py_ssize_t n_heads = w.shape[0]
    cdef Py_ssize_t n_rows = w.shape[1]
    cdef Py_ssize_t m_count = w.shape[2]
    cdef Py_ssize_t dh = tokens.shape[2]
    cdef Py_ssize_t n, h, m, d, off
    cdef floating wv

    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n_rows, n_heads * dh), dtype=dtype)
    cdef floating[:, ::1] out = out_arr

    with nogil:
        for n in range(n_rows):
            for h in range(n_heads):
                off = h * dh
                for m in range(m_count):
                    wv = w[h, n, m]
                    for d in range(dh):
                        out[n, off + d] += wv * tokens[h, m, d]
    return out_arr
