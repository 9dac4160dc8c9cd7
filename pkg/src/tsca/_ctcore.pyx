# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementation of the hot kernels.

Same six callables and the same contract as tsca._pycore: float64
C-contiguous in, fresh arrays out, inputs never mutated. The typed
memoryview signatures enforce dtype and contiguity at the boundary.
"""

import numpy as np

from libc.math cimport exp, sqrt

BACKEND = "cython"


def softmax_rows(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double mx, z
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        z = 0.0
        for j in range(m):
            out[i, j] = exp(x[i, j] - mx)
            z += out[i, j]
        for j in range(m):
            out[i, j] /= z
    return out_arr


def softmax_rows_vjp(double[:, ::1] y, double[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double inner
    for i in range(n):
        inner = 0.0
        for j in range(m):
            inner += y[i, j] * gy[i, j]
        for j in range(m):
            out[i, j] = y[i, j] * (gy[i, j] - inner)
    return out_arr


def l2norm_cols(double[:, ::1] x, double eps):
    cdef Py_ssize_t d = x.shape[0], n = x.shape[1], i, j
    out_arr = np.empty((d, n), dtype=np.float64)
    norms_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] norms = norms_arr
    cdef double acc, denom
    for j in range(n):
        acc = 0.0
        for i in range(d):
            acc += x[i, j] * x[i, j]
        norms[j] = sqrt(acc)
        denom = norms[j] if norms[j] > eps else eps
        for i in range(d):
            out[i, j] = x[i, j] / denom
    return out_arr, norms_arr


def l2norm_cols_vjp(double[:, ::1] y, double[::1] norms, double[:, ::1] gy, double eps):
    cdef Py_ssize_t d = y.shape[0], n = y.shape[1], i, j
    out_arr = np.empty((d, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double proj, denom
    for j in range(n):
        if norms[j] < eps:
            # below the guard the map is x / eps, a plain scaling
            for i in range(d):
                out[i, j] = gy[i, j] / eps
            continue
        denom = norms[j] if norms[j] > eps else eps
        proj = 0.0
        for i in range(d):
            proj += y[i, j] * gy[i, j]
        for i in range(d):
            out[i, j] = (gy[i, j] - y[i, j] * proj) / denom
    return out_arr


def cond_plan(double[:, ::1] s, double[::1] alpha):
    cdef Py_ssize_t n = s.shape[0], m = s.shape[1], i, j
    p_arr = np.empty((n, m), dtype=np.float64)
    u_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] p = p_arr
    cdef double[:, ::1] u = u_arr
    cdef double mx, z, e
    cdef bint all_pos = True, first
    for j in range(m):
        if alpha[j] <= 0.0:
            all_pos = False
            break
    for i in range(n):
        if all_pos:
            mx = s[i, 0]
            for j in range(1, m):
                if s[i, j] > mx:
                    mx = s[i, j]
        else:
            # max over supported columns only, so z cannot underflow to 0
            mx = 0.0
            first = True
            for j in range(m):
                if alpha[j] > 0.0 and (first or s[i, j] > mx):
                    mx = s[i, j]
                    first = False
        z = 0.0
        for j in range(m):
            e = exp(s[i, j] - mx)
            u[i, j] = e
            p[i, j] = e * alpha[j]
            z += p[i, j]
        for j in range(m):
            p[i, j] /= z
            u[i, j] /= z
    return p_arr, u_arr


def cond_plan_vjp(double[:, ::1] p, double[:, ::1] u, double[:, ::1] gp):
    cdef Py_ssize_t n = p.shape[0], m = p.shape[1], i, j
    gs_arr = np.empty((n, m), dtype=np.float64)
    galpha_arr = np.zeros(m, dtype=np.float64)
    cdef double[:, ::1] gs = gs_arr
    cdef double[::1] galpha = galpha_arr
    cdef double inner
    for i in range(n):
        inner = 0.0
        for j in range(m):
            inner += gp[i, j] * p[i, j]
        for j in range(m):
            gs[i, j] = p[i, j] * (gp[i, j] - inner)
            galpha[j] += u[i, j] * (gp[i, j] - inner)
    return gs_arr, galpha_arr
