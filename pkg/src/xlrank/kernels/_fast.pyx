# Fused row-wise kernels. Mirrors numpy_ops; one pass per row, no
# intermediate temporaries.

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()


def softmax_fwd(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1]
    out = np.empty((n, h), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef Py_ssize_t i, j
    cdef double m, s, v
    for i in range(n):
        m = x[i, 0]
        for j in range(1, h):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(h):
            v = exp(x[i, j] - m)
            y[i, j] = v
            s += v
        for j in range(h):
            y[i, j] /= s
    return out


def softmax_bwd(double[:, ::1] y, double[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], h = y.shape[1]
    out = np.empty((n, h), dtype=np.float64)
    cdef double[:, ::1] gx = out
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(h):
            dot += gy[i, j] * y[i, j]
        for j in range(h):
            gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return out


def layer_norm_fwd(double[:, ::1] x, double[::1] gain, double[::1] bias,
                   double eps):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1]
    y_out = np.empty((n, h), dtype=np.float64)
    xhat_out = np.empty((n, h), dtype=np.float64)
    istd_out = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] y = y_out
    cdef double[:, ::1] xhat = xhat_out
    cdef double[::1] istd = istd_out
    cdef Py_ssize_t i, j
    cdef double mu, var, d, inv
    for i in range(n):
        mu = 0.0
        for j in range(h):
            mu += x[i, j]
        mu /= h
        var = 0.0
        for j in range(h):
            d = x[i, j] - mu
            var += d * d
        var /= h
        inv = 1.0 / sqrt(var + eps)
        istd[i] = inv
        for j in range(h):
            d = (x[i, j] - mu) * inv
            xhat[i, j] = d
            y[i, j] = d * gain[j] + bias[j]
    return y_out, xhat_out, istd_out


def layer_norm_bwd(double[:, ::1] gy, double[:, ::1] xhat,
                   double[::1] inv_std, double[::1] gain):
    cdef Py_ssize_t n = gy.shape[0], h = gy.shape[1]
    gx_out = np.empty((n, h), dtype=np.float64)
    dgain_out = np.zeros(h, dtype=np.float64)
    dbias_out = np.zeros(h, dtype=np.float64)
    cdef double[:, ::1] gx = gx_out
    cdef double[::1] dgain = dgain_out
    cdef double[::1] dbias = dbias_out
    cdef Py_ssize_t i, j
    cdef double m1, m2, dxh
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(h):
            dxh = gy[i, j] * gain[j]
            m1 += dxh
            m2 += dxh * xhat[i, j]
            dgain[j] += gy[i, j] * xhat[i, j]
            dbias[j] += gy[i, j]
        m1 /= h
        m2 /= h
        for j in range(h):
            gx[i, j] = inv_std[i] * (gy[i, j] * gain[j] - m1 - xhat[i, j] * m2)
    return gx_out, dgain_out, dbias_out


def cross_entropy_fwd(double[:, ::1] logits, long[::1] targets):
    cdef Py_ssize_t n = logits.shape[0], v = logits.shape[1]
    losses_out = np.empty(n, dtype=np.float64)
    probs_out = np.empty((n, v), dtype=np.float64)
    cdef double[::1] losses = losses_out
    cdef double[:, ::1] probs = probs_out
    cdef Py_ssize_t i, j
    cdef double m, s, e
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, v):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(v):
            e = exp(logits[i, j] - m)
            probs[i, j] = e
            s += e
        for j in range(v):
            probs[i, j] /= s
        losses[i] = log(s) + m - logits[i, targets[i]]
    return losses_out, probs_out


def cross_entropy_bwd(double[:, ::1] probs, long[::1] targets, double scale):
    cdef Py_ssize_t n = probs.shape[0], v = probs.shape[1]
    out = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] g = out
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(v):
            g[i, j] = probs[i, j] * scale
        g[i, targets[i]] -= scale
    return out
