# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batched MoE kernels (same contract as ``_kernels_py``).

Per-sample work runs in plain C loops. Each chunk of CHUNK rows accumulates
sequentially into its own row of a partials table; the rows are then
combined by a fixed pairwise tree.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef enum:
    CHUNK = 1024

cdef int LINEAR = 0
cdef int RELU = 0


cdef inline void _gates(const double[:, ::1] X, Py_ssize_t r,
                        const double[:, :, ::1] A, const double[:, ::1] B,
                        const double[::1] C, int top_k, double* g, int* rank) nogil:
    cdef Py_ssize_t N = B.shape[0], d = B.shape[1]
    cdef Py_ssize_t k, u, v, j
    cdef double s, row, mx, tot
    for k in range(N):
        s = C[k]
        for u in range(d):
            row = B[k, u]
            for v in range(d):
                row = row + A[k, u, v] * X[r, v]
            s = s + row * X[r, u]
        g[k] = s
    if top_k > 0 and top_k < N:
        # rank[k] = number of entries beating k (ties go to the lower index)
        for k in range(N):
            rank[k] = 0
            for j in range(N):
                if g[j] > g[k] or (g[j] == g[k] and j < k):
                    rank[k] += 1
        for k in range(N):
            if rank[k] >= top_k:
                g[k] = -INFINITY
    mx = -INFINITY
    for k in range(N):
        if g[k] > mx:
            mx = g[k]
    tot = 0.0
    for k in range(N):
        g[k] = exp(g[k] - mx)
        tot = tot + g[k]
    for k in range(N):
        g[k] = g[k] / tot


cdef inline void _experts(const double[:, ::1] X, Py_ssize_t r, const double[:, ::1] Eta,
                          int family, int m, int act, double* h, double* z, double* dz) nogil:
    cdef Py_ssize_t N = Eta.shape[0], d = X.shape[1]
    cdef Py_ssize_t k, u, j
    cdef double s, t, out
    for k in range(N):
        if family == LINEAR:
            s = Eta[k, d]
            for u in range(d):
                s = s + Eta[k, u] * X[r, u]
            h[k] = s
        else:
            out = Eta[k, m * d + 2 * m]
            for j in range(m):
                s = Eta[k, m * d + j]
                for u in range(d):
                    s = s + Eta[k, j * d + u] * X[r, u]
                if act == RELU:
                    if s > 0:
                        z[k * m + j] = s
                        dz[k * m + j] = 1.0
                    else:
                        z[k * m + j] = 0.0
                        dz[k * m + j] = 0.0
                else:
                    t = tanh(s)
                    z[k * m + j] = t
                    dz[k * m + j] = 1.0 - t * t
                out = out + Eta[k, m * d + m + j] * z[k * m + j]
            h[k] = out


def predict(const double[:, ::1] X, const double[:, :, ::1] A, const double[:, ::1] B,
            const double[::1] C, const double[:, ::1] Eta, int family, int m, int act, int top_k):
    cdef Py_ssize_t n = X.shape[0], N = B.shape[0]
    cdef Py_ssize_t r, k
    cdef double f
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double* g = <double*> malloc(N * sizeof(double))
    cdef double* h = <double*> malloc(N * sizeof(double))
    cdef double* z = <double*> malloc((N * m + 1) * sizeof(double))
    cdef double* dz = <double*> malloc((N * m + 1) * sizeof(double))
    cdef int* rank = <int*> malloc(N * sizeof(int))
    try:
        with nogil:
            for r in range(n):
                _gates(X, r, A, B, C, top_k, g, rank)
                _experts(X, r, Eta, family, m, act, h, z, dz)
                f = 0.0
                for k in range(N):
                    f = f + g[k] * h[k]
                out[r] = f
    finally:
        free(g); free(h); free(z); free(dz); free(rank)
    return out_arr


def loss_grad(const double[:, ::1] X, const double[::1] Y, const double[:, :, ::1] A,
              const double[:, ::1] B, const double[::1] C, const double[:, ::1] Eta,
              int family, int m, int act, int top_k):
    cdef Py_ssize_t n = X.shape[0], N = B.shape[0], d = B.shape[1], q = Eta.shape[1]
    cdef Py_ssize_t nchunks = (n + CHUNK - 1) // CHUNK
    cdef Py_ssize_t oA = 1, oB = 1 + N * d * d, oC = oB + N * d, oE = oC + N
    cdef Py_ssize_t P = oE + N * q
    parts_arr = np.zeros((max(nchunks, 1), P))
    cdef double[:, ::1] parts = parts_arr
    cdef Py_ssize_t ch, r, k, u, v, j, lo, hi
    cdef double f, e, w, t, wg, pz
    cdef double* g = <double*> malloc(N * sizeof(double))
    cdef double* h = <double*> malloc(N * sizeof(double))
    cdef double* z = <double*> malloc((N * m + 1) * sizeof(double))
    cdef double* dz = <double*> malloc((N * m + 1) * sizeof(double))
    cdef int* rank = <int*> malloc(N * sizeof(int))
    try:
        with nogil:
            for ch in range(nchunks):
                lo = ch * CHUNK
                hi = lo + CHUNK
                if hi > n:
                    hi = n
                for r in range(lo, hi):
                    _gates(X, r, A, B, C, top_k, g, rank)
                    _experts(X, r, Eta, family, m, act, h, z, dz)
                    f = 0.0
                    for k in range(N):
                        f = f + g[k] * h[k]
                    e = Y[r] - f
                    parts[ch, 0] += e * e
                    w = -2.0 * e
                    for k in range(N):
                        if g[k] == 0.0:
                            continue
                        t = w * g[k] * (h[k] - f)
                        parts[ch, oC + k] += t
                        for u in range(d):
                            parts[ch, oB + k * d + u] += t * X[r, u]
                            for v in range(d):
                                parts[ch, oA + (k * d + u) * d + v] += t * X[r, u] * X[r, v]
                        wg = w * g[k]
                        if family == LINEAR:
                            for u in range(d):
                                parts[ch, oE + k * q + u] += wg * X[r, u]
                            parts[ch, oE + k * q + d] += wg
                        else:
                            for j in range(m):
                                pz = wg * Eta[k, m * d + m + j] * dz[k * m + j]
                                for u in range(d):
                                    parts[ch, oE + k * q + j * d + u] += pz * X[r, u]
                                parts[ch, oE + k * q + m * d + j] += pz
                                parts[ch, oE + k * q + m * d + m + j] += wg * z[k * m + j]
                            parts[ch, oE + k * q + m * d + 2 * m] += wg
    finally:
        free(g); free(h); free(z); free(dz); free(rank)

    rows = [parts_arr[i] for i in range(parts_arr.shape[0])]
    while len(rows) > 1:
        nxt = [rows[i] + rows[i + 1] for i in range(0, len(rows) - 1, 2)]
        if len(rows) % 2:
            nxt.append(rows[len(rows) - 1])
        rows = nxt
    total = rows[0]
    return (
        total[0],
        total[oA:oB].reshape(N, d, d),
        total[oB:oC].reshape(N, d),
        total[oC:oE].copy(),
        total[oE:].reshape(N, q),
    )
