# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled segment reductions over row-indexed 2-D arrays.

Segment ids need not be sorted. Every function takes ``values`` of shape
``(n, c)`` and ``seg`` of shape ``(n,)`` with entries in ``[0, num)``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, INFINITY

ctypedef fused real:
    float
    double

ctypedef cnp.int64_t idx_t


def segment_sum(const real[:, ::1] values, const idx_t[::1] seg, Py_ssize_t num):
    cdef Py_ssize_t n = values.shape[0], c = values.shape[1], i, j
    cdef idx_t s
    out_arr = np.zeros((num, c), dtype=np.asarray(values).dtype)
    cdef real[:, ::1] out = out_arr
    for i in range(n):
        s = seg[i]
        for j in range(c):
            out[s, j] += values[i, j]
    return out_arr


def segment_max(const real[:, ::1] values, const idx_t[::1] seg, Py_ssize_t num):
    cdef Py_ssize_t n = values.shape[0], c = values.shape[1], i, j
    cdef idx_t s
    out_arr = np.full((num, c), -np.inf, dtype=np.asarray(values).dtype)
    cdef real[:, ::1] out = out_arr
    for i in range(n):
        s = seg[i]
        for j in range(c):
            if values[i, j] > out[s, j]:
                out[s, j] = values[i, j]
    return out_arr


def segment_softmax(const real[:, ::1] logits, const idx_t[::1] seg, Py_ssize_t num):
    cdef Py_ssize_t n = logits.shape[0], c = logits.shape[1], i, j
    cdef idx_t s
    dtype = np.asarray(logits).dtype
    mx_arr = np.full((num, c), -INFINITY, dtype=dtype)
    den_arr = np.zeros((num, c), dtype=dtype)
    out_arr = np.empty((n, c), dtype=dtype)
    cdef real[:, ::1] mx = mx_arr
    cdef real[:, ::1] den = den_arr
    cdef real[:, ::1] out = out_arr
    for i in range(n):
        s = seg[i]
        for j in range(c):
            if logits[i, j] > mx[s, j]:
                mx[s, j] = logits[i, j]
    for i in range(n):
        s = seg[i]
        for j in range(c):
            out[i, j] = exp(logits[i, j] - mx[s, j])
            den[s, j] += out[i, j]
    for i in range(n):
        s = seg[i]
        for j in range(c):
            out[i, j] = out[i, j] / den[s, j]
    return out_arr


def segment_softmax_backward(const real[:, ::1] probs, const real[:, ::1] grad,
                             const idx_t[::1] seg, Py_ssize_t num):
    cdef Py_ssize_t n = probs.shape[0], c = probs.shape[1], i, j
    cdef idx_t s
    dtype = np.asarray(probs).dtype
    dot_arr = np.zeros((num, c), dtype=dtype)
    out_arr = np.empty((n, c), dtype=dtype)
    cdef real[:, ::1] dot = dot_arr
    cdef real[:, ::1] out = out_arr
    for i in range(n):
        s = seg[i]
        for j in range(c):
            dot[s, j] += probs[i, j] * grad[i, j]
    for i in range(n):
        s = seg[i]
        for j in range(c):
            out[i, j] = probs[i, j] * (grad[i, j] - dot[s, j])
    return out_arr
