# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_fallback``.

Batches here are tiny (tens of rows, tens of columns), so per-call numpy
overhead dominates a training step; these loops fuse each loss head into a
single pass.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()

NAME = "cython"


cdef inline double _qk(Py_ssize_t k, long long a, long long b, double lam) nogil:
    cdef double q = 0.0
    if k == a:
        q += lam
    if k == b:
        q += 1.0 - lam
    return q


def sqdist(const double[:, ::1] emb, const double[:, ::1] protos):
    cdef Py_ssize_t B = emb.shape[0], M = protos.shape[0], E = emb.shape[1]
    cdef Py_ssize_t r, k, e
    cdef double acc, t
    out_arr = np.empty((B, M), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for r in range(B):
            for k in range(M):
                acc = 0.0
                for e in range(E):
                    t = emb[r, e] - protos[k, e]
                    acc = acc + t * t
                out[r, k] = acc
    return out_arr


cdef void _log_softmax_row(double* z, Py_ssize_t M) nogil:
    cdef Py_ssize_t k
    cdef double mx = z[0], s = 0.0, lse
    for k in range(1, M):
        if z[k] > mx:
            mx = z[k]
    for k in range(M):
        z[k] = z[k] - mx
        s = s + exp(z[k])
    lse = log(s)
    for k in range(M):
        z[k] = z[k] - lse


def xent_rows(const double[:, ::1] logits, const long long[::1] yi,
              const long long[::1] yj, const double[::1] lam,
              const double[::1] row_w):
    cdef Py_ssize_t B = logits.shape[0], M = logits.shape[1]
    cdef Py_ssize_t r, k
    cdef double l
    loss_arr = np.empty(B, dtype=np.float64)
    grad_arr = np.empty((B, M), dtype=np.float64)
    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] grad = grad_arr
    with nogil:
        for r in range(B):
            for k in range(M):
                grad[r, k] = logits[r, k]
            _log_softmax_row(&grad[r, 0], M)
            l = lam[r]
            loss[r] = -(l * grad[r, yi[r]] + (1.0 - l) * grad[r, yj[r]])
            for k in range(M):
                grad[r, k] = (exp(grad[r, k]) - _qk(k, yi[r], yj[r], l)) * row_w[r]
    return loss_arr, grad_arr


def proto_rows(const double[:, ::1] emb, const double[:, ::1] protos,
               const long long[::1] yi, const long long[::1] yj,
               const double[::1] lam, const double[::1] row_w,
               double gamma, double w_mse):
    cdef Py_ssize_t B = emb.shape[0], M = protos.shape[0], E = emb.shape[1]
    cdef Py_ssize_t r, k, e
    cdef double acc, t, l, g, q
    dce_arr = np.empty(B, dtype=np.float64)
    mse_arr = np.empty(B, dtype=np.float64)
    demb_arr = np.zeros((B, E), dtype=np.float64)
    dprot_arr = np.zeros((M, E), dtype=np.float64)
    d_arr = np.empty(M, dtype=np.float64)
    z_arr = np.empty(M, dtype=np.float64)
    cdef double[::1] dce = dce_arr, mse = mse_arr, d = d_arr, z = z_arr
    cdef double[:, ::1] demb = demb_arr, dprot = dprot_arr
    with nogil:
        for r in range(B):
            for k in range(M):
                acc = 0.0
                for e in range(E):
                    t = emb[r, e] - protos[k, e]
                    acc = acc + t * t
                d[k] = acc
                z[k] = -gamma * acc
            _log_softmax_row(&z[0], M)
            l = lam[r]
            dce[r] = -(l * z[yi[r]] + (1.0 - l) * z[yj[r]])
            mse[r] = l * d[yi[r]] + (1.0 - l) * d[yj[r]]
            for k in range(M):
                q = _qk(k, yi[r], yj[r], l)
                g = (-gamma * (exp(z[k]) - q) + w_mse * q) * row_w[r]
                if g == 0.0:
                    continue
                for e in range(E):
                    t = 2.0 * g * (emb[r, e] - protos[k, e])
                    demb[r, e] = demb[r, e] + t
                    dprot[k, e] = dprot[k, e] - t
    return dce_arr, mse_arr, demb_arr, dprot_arr


def adam_update(double[::1] param, const double[::1] grad, double[::1] m,
                double[::1] v, double lr, double beta1, double beta2,
                double eps, double bc1, double bc2):
    cdef Py_ssize_t i, n = param.shape[0]
    cdef double g
    with nogil:
        for i in range(n):
            g = grad[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * g
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
            param[i] = param[i] - lr * (m[i] / bc1) / (sqrt(v[i] / bc2) + eps)


def rank_auc(id_scores, ood_scores):
    cdef Py_ssize_t n = len(id_scores), m = len(ood_scores)
    allsc = np.concatenate([np.asarray(id_scores, dtype=np.float64),
                            np.asarray(ood_scores, dtype=np.float64)])
    order_arr = np.argsort(allsc, kind="mergesort")
    cdef const double[::1] s = allsc
    cdef const long long[::1] order = order_arr.astype(np.int64)
    cdef Py_ssize_t i = 0, j, t, total = n + m
    cdef double rank_sum = 0.0, midrank
    cdef Py_ssize_t n_pos
    with nogil:
        while i < total:
            j = i
            while j + 1 < total and s[order[j + 1]] == s[order[i]]:
                j += 1
            midrank = (i + j + 2) / 2.0
            n_pos = 0
            for t in range(i, j + 1):
                if order[t] < n:
                    n_pos += 1
            rank_sum += n_pos * midrank
            i = j + 1
    return (rank_sum - n * (n + 1) / 2.0) / (n * m)
