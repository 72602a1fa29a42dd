# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels: softmax, layer norm, exact top-K scan.

Signatures mirror :mod:`mercatran.kernels._pykernels` exactly.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, INFINITY

cnp.import_array()

ctypedef fused real:
    float
    double


def softmax_rows_fwd(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef double mx, s, e
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, m), dtype=dtype)
    cdef real[:, ::1] y = out
    with nogil:
        for i in range(n):
            mx = -INFINITY
            for j in range(m):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(m):
                e = exp(x[i, j] - mx)
                y[i, j] = <real>e
                s += e
            for j in range(m):
                y[i, j] = <real>(y[i, j] / s)
    return out


def softmax_rows_bwd(real[:, ::1] y, real[:, ::1] g):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    cdef double dot
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, m), dtype=dtype)
    cdef real[:, ::1] gx = out
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(m):
                dot += <double>y[i, j] * g[i, j]
            for j in range(m):
                gx[i, j] = <real>(y[i, j] * (g[i, j] - dot))
    return out


def layer_norm_fwd(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double mean, var, diff, r
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    xhat_arr = np.empty((n, d), dtype=dtype)
    rstd_arr = np.empty(n, dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef real[:, ::1] xhat = xhat_arr
    cdef real[::1] rstd = rstd_arr
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean += x[i, j]
            mean /= d
            var = 0.0
            for j in range(d):
                diff = x[i, j] - mean
                var += diff * diff
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = <real>r
            for j in range(d):
                xhat[i, j] = <real>((x[i, j] - mean) * r)
                y[i, j] = <real>(xhat[i, j] * gamma[j] + beta[j])
    return y_arr, xhat_arr, rstd_arr


def layer_norm_bwd(real[:, ::1] g, real[:, ::1] xhat, real[::1] rstd, real[::1] gamma):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    cdef double m1, m2, gh
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.empty((n, d), dtype=dtype)
    ggamma_acc = np.zeros(d, dtype=np.float64)
    gbeta_acc = np.zeros(d, dtype=np.float64)
    cdef real[:, ::1] gx = gx_arr
    cdef double[::1] gg = ggamma_acc
    cdef double[::1] gb = gbeta_acc
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                gh = <double>g[i, j] * gamma[j]
                m1 += gh
                m2 += gh * xhat[i, j]
                gg[j] += <double>g[i, j] * xhat[i, j]
                gb[j] += g[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                gh = <double>g[i, j] * gamma[j]
                gx[i, j] = <real>(rstd[i] * (gh - m1 - xhat[i, j] * m2))
    return gx_arr, ggamma_acc.astype(dtype), gbeta_acc.astype(dtype)


cdef inline bint _ranks_before(double s1, long long r1, double s2, long long r2) nogil:
    # descending score, then ascending id rank
    return s1 > s2 or (s1 == s2 and r1 < r2)


def topk_scan(const float[:, ::1] emb, const double[::1] query, const long long[::1] id_rank, Py_ssize_t k):
    """Full scan; keeps a sorted buffer of the best ``k`` (score, id-rank) pairs."""
    cdef Py_ssize_t n = emb.shape[0], d = emb.shape[1], i, j, pos, kk
    cdef double acc
    kk = k if k < n else n
    idx_arr = np.empty(kk, dtype=np.int64)
    score_arr = np.empty(kk, dtype=np.float64)
    cdef long long[::1] bi = idx_arr
    cdef double[::1] bs = score_arr
    cdef Py_ssize_t filled = 0
    if kk == 0:
        return idx_arr, score_arr
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc = acc + (<double>emb[i, j]) * query[j]
            if filled == kk and not _ranks_before(acc, id_rank[i], bs[kk - 1], id_rank[bi[kk - 1]]):
                continue
            pos = filled if filled < kk else kk - 1
            while pos > 0 and _ranks_before(acc, id_rank[i], bs[pos - 1], id_rank[bi[pos - 1]]):
                bs[pos] = bs[pos - 1]
                bi[pos] = bi[pos - 1]
                pos -= 1
            bs[pos] = acc
            bi[pos] = i
            if filled < kk:
                filled += 1
    return idx_arr, score_arr
