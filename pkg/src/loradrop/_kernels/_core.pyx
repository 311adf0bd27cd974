# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled single-pass versions of the hot kernels.

Semantics match loradrop._kernels._numpy_impl; the test suite asserts
agreement between the two backends.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, sqrt, INFINITY

cnp.import_array()

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


def softmax_rows(cnp.ndarray[cnp.float64_t, ndim=2] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] y = np.empty((m, n), dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double mx, s, v
    for i in range(m):
        mx = -INFINITY
        for j in range(n):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(n):
            v = exp(x[i, j] - mx)
            y[i, j] = v
            s += v
        for j in range(n):
            y[i, j] /= s
    return y


def softmax_rows_grad(cnp.ndarray[cnp.float64_t, ndim=2] y,
                      cnp.ndarray[cnp.float64_t, ndim=2] dy):
    cdef Py_ssize_t m = y.shape[0], n = y.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dx = np.empty((m, n), dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double s
    for i in range(m):
        s = 0.0
        for j in range(n):
            s += dy[i, j] * y[i, j]
        for j in range(n):
            dx[i, j] = y[i, j] * (dy[i, j] - s)
    return dx


def gelu(cnp.ndarray[cnp.float64_t, ndim=1] x):
    cdef Py_ssize_t n = x.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] y = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t i
    cdef double v
    for i in range(n):
        v = x[i]
        y[i] = 0.5 * v * (1.0 + erf(v * INV_SQRT2))
    return y


def gelu_grad(cnp.ndarray[cnp.float64_t, ndim=1] x,
              cnp.ndarray[cnp.float64_t, ndim=1] dy):
    cdef Py_ssize_t n = x.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dx = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t i
    cdef double v, d
    for i in range(n):
        v = x[i]
        d = 0.5 * (1.0 + erf(v * INV_SQRT2)) + v * exp(-0.5 * v * v) * INV_SQRT_2PI
        dx[i] = dy[i] * d
    return dx


def layernorm(cnp.ndarray[cnp.float64_t, ndim=2] x,
              cnp.ndarray[cnp.float64_t, ndim=1] gamma,
              cnp.ndarray[cnp.float64_t, ndim=1] beta,
              double eps):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] y = np.empty((m, n), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] mu = np.empty(m, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] rstd = np.empty(m, dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double s, v, var, r
    for i in range(m):
        s = 0.0
        for j in range(n):
            s += x[i, j]
        s /= n
        mu[i] = s
        var = 0.0
        for j in range(n):
            v = x[i, j] - s
            var += v * v
        var /= n
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(n):
            y[i, j] = (x[i, j] - s) * r * gamma[j] + beta[j]
    return y, mu, rstd


def layernorm_grad(cnp.ndarray[cnp.float64_t, ndim=2] x,
                   cnp.ndarray[cnp.float64_t, ndim=1] gamma,
                   cnp.ndarray[cnp.float64_t, ndim=1] mu,
                   cnp.ndarray[cnp.float64_t, ndim=1] rstd,
                   cnp.ndarray[cnp.float64_t, ndim=2] dy):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dx = np.empty((m, n), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dgamma = np.zeros(n, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dbeta = np.zeros(n, dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double m1, m2, xh, g, r
    for i in range(m):
        r = rstd[i]
        m1 = 0.0
        m2 = 0.0
        for j in range(n):
            xh = (x[i, j] - mu[i]) * r
            g = dy[i, j] * gamma[j]
            m1 += g
            m2 += g * xh
            dgamma[j] += dy[i, j] * xh
            dbeta[j] += dy[i, j]
        m1 /= n
        m2 /= n
        for j in range(n):
            xh = (x[i, j] - mu[i]) * r
            dx[i, j] = (dy[i, j] * gamma[j] - m1 - xh * m2) * r
    return dx, dgamma, dbeta
