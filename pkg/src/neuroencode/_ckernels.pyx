# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused row-wise kernels for the autodiff engine (compiled variant)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

cdef double GELU_C = 0.7978845608028654  # sqrt(2/pi)
cdef double GELU_K = 0.044715


def gelu_forward(const double[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n)
    cdef double[::1] y = out
    cdef double v, t
    for i in range(n):
        v = x[i]
        # 0.5 * (1 + tanh(z)) == 1 / (1 + exp(-2z))
        y[i] = v / (1.0 + exp(-2.0 * GELU_C * (v + GELU_K * v * v * v)))
    return out


def gelu_backward(const double[::1] x, const double[::1] g):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n)
    cdef double[::1] gx = out
    cdef double v, t
    for i in range(n):
        v = x[i]
        t = 2.0 / (1.0 + exp(-2.0 * GELU_C * (v + GELU_K * v * v * v))) - 1.0
        gx[i] = g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v))
    return out


def layer_norm_forward(const double[:, ::1] x, const double[::1] gain, const double[::1] bias, double eps):
    cdef Py_ssize_t i, j, m = x.shape[0], n = x.shape[1]
    y_arr = np.empty((m, n))
    xhat_arr = np.empty((m, n))
    rstd_arr = np.empty(m)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mu, var, d, r
    for i in range(m):
        mu = 0.0
        for j in range(n):
            mu += x[i, j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mu
            var += d * d
        var /= n
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(n):
            d = (x[i, j] - mu) * r
            xhat[i, j] = d
            y[i, j] = d * gain[j] + bias[j]
    return y_arr, xhat_arr, rstd_arr


def layer_norm_backward(const double[:, ::1] g, const double[:, ::1] xhat, const double[::1] rstd, const double[::1] gain):
    cdef Py_ssize_t i, j, m = g.shape[0], n = g.shape[1]
    gx_arr = np.empty((m, n))
    ggain_arr = np.zeros(n)
    gbias_arr = np.zeros(n)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] ggain = ggain_arr
    cdef double[::1] gbias = gbias_arr
    cdef double s1, s2, gh
    for i in range(m):
        s1 = 0.0
        s2 = 0.0
        for j in range(n):
            gh = g[i, j] * gain[j]
            s1 += gh
            s2 += gh * xhat[i, j]
            ggain[j] += g[i, j] * xhat[i, j]
            gbias[j] += g[i, j]
        s1 /= n
        s2 /= n
        for j in range(n):
            gx[i, j] = rstd[i] * (g[i, j] * gain[j] - s1 - xhat[i, j] * s2)
    return gx_arr, ggain_arr, gbias_arr


def softmax_forward(const double[:, ::1] x):
    cdef Py_ssize_t i, j, m = x.shape[0], n = x.shape[1]
    out = np.empty((m, n))
    cdef double[:, ::1] y = out
    cdef double mx, s
    for i in range(m):
        mx = x[i, 0]
        for j in range(1, n):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(n):
            y[i, j] = exp(x[i, j] - mx)
            s += y[i, j]
        s = 1.0 / s
        for j in range(n):
            y[i, j] *= s
    return out


def softmax_backward(const double[:, ::1] y, const double[:, ::1] g):
    cdef Py_ssize_t i, j, m = y.shape[0], n = y.shape[1]
    out = np.empty((m, n))
    cdef double[:, ::1] gx = out
    cdef double dot
    for i in range(m):
        dot = 0.0
        for j in range(n):
            dot += g[i, j] * y[i, j]
        for j in range(n):
            gx[i, j] = y[i, j] * (g[i, j] - dot)
    return out
