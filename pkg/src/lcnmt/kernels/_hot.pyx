# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: fused row-wise softmax / log-softmax / layer-norm
forward+backward and the embedding-gradient scatter-add.

Same 2-D contract as the NumPy fallback in `_numpy.py`; outputs are
written into caller-allocated arrays by the wrappers in the package
__init__. Row sums are sequential left-to-right, so each backend is
deterministic on its own.
"""

import numpy as np

cimport cython
from libc.math cimport exp, log, sqrt

ctypedef fused real:
    float
    double

NAME = "compiled"


def softmax_fwd(real[:, ::1] x, real[:, ::1] out):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    cdef double m, s
    with nogil:
        for i in range(n):
            m = x[i, 0]
            for j in range(1, k):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(k):
                out[i, j] = <real> exp(x[i, j] - m)
                s += out[i, j]
            for j in range(k):
                out[i, j] = <real> (out[i, j] / s)


def softmax_bwd(real[:, ::1] y, real[:, ::1] dy, real[:, ::1] out):
    cdef Py_ssize_t n = y.shape[0], k = y.shape[1], i, j
    cdef double s
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(k):
                s += dy[i, j] * y[i, j]
            for j in range(k):
                out[i, j] = <real> (y[i, j] * (dy[i, j] - s))


def log_softmax_fwd(real[:, ::1] x, real[:, ::1] out):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    cdef double m, s
    with nogil:
        for i in range(n):
            m = x[i, 0]
            for j in range(1, k):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(k):
                s += exp(x[i, j] - m)
            s = log(s)
            for j in range(k):
                out[i, j] = <real> (x[i, j] - m - s)


def log_softmax_bwd(real[:, ::1] logp, real[:, ::1] dy, real[:, ::1] out):
    cdef Py_ssize_t n = logp.shape[0], k = logp.shape[1], i, j
    cdef double s
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(k):
                s += dy[i, j]
            for j in range(k):
                out[i, j] = <real> (dy[i, j] - exp(logp[i, j]) * s)


def layer_norm_fwd(real[:, ::1] x, real[:, ::1] xhat, real[::1] rstd,
                   double eps):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1], i, j
    cdef double mu, var, d, r
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(k):
                mu += x[i, j]
            mu /= k
            var = 0.0
            for j in range(k):
                d = x[i, j] - mu
                var += d * d
            var /= k
            r = 1.0 / sqrt(var + eps)
            rstd[i] = <real> r
            for j in range(k):
                xhat[i, j] = <real> ((x[i, j] - mu) * r)


def layer_norm_bwd(real[:, ::1] xhat, real[::1] rstd, real[:, ::1] dy,
                   real[:, ::1] out):
    cdef Py_ssize_t n = xhat.shape[0], k = xhat.shape[1], i, j
    cdef double m1, m2
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(k):
                m1 += dy[i, j]
                m2 += dy[i, j] * xhat[i, j]
            m1 /= k
            m2 /= k
            for j in range(k):
                out[i, j] = <real> ((dy[i, j] - m1 - xhat[i, j] * m2) * rstd[i])


def scatter_add_rows(real[:, ::1] out, const long[::1] ids,
                     real[:, ::1] grads):
    cdef Py_ssize_t n = grads.shape[0], k = grads.shape[1], i, j
    cdef long r
    with nogil:
        for i in range(n):
            r = ids[i]
            for j in range(k):
                out[r, j] += grads[i, j]
