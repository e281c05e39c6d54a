# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled single-thread kernels for the autodiff hot path.

Same into-style signatures as the numpy reference module; the facade picks
one of the two at import time. Loops are deliberately sequential so results
are reproducible run to run.
"""

cimport cython
from libc.math cimport erf, exp, fabs, log, log1p, sqrt

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT2PI = 0.3989422804014327


def gelu_fwd_into(cython.floating[::1] x, cython.floating[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v
    for i in range(n):
        v = x[i]
        out[i] = <cython.floating>(0.5 * v * (1.0 + erf(v * INV_SQRT2)))


def gelu_bwd_into(cython.floating[::1] x, cython.floating[::1] gy,
                  cython.floating[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, cdf, pdf
    for i in range(n):
        v = x[i]
        cdf = 0.5 * (1.0 + erf(v * INV_SQRT2))
        pdf = INV_SQRT2PI * exp(-0.5 * v * v)
        out[i] = <cython.floating>(gy[i] * (cdf + v * pdf))


def softplus_fwd_into(cython.floating[::1] x, cython.floating[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v
    for i in range(n):
        v = x[i]
        out[i] = <cython.floating>((v if v > 0.0 else 0.0) + log1p(exp(-fabs(v))))


def softplus_bwd_into(cython.floating[::1] x, cython.floating[::1] gy,
                      cython.floating[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, z
    for i in range(n):
        v = x[i]
        z = exp(-fabs(v))
        if v >= 0.0:
            out[i] = <cython.floating>(gy[i] / (1.0 + z))
        else:
            out[i] = <cython.floating>(gy[i] * z / (1.0 + z))


def softmax_fwd_into(cython.floating[:, ::1] x, cython.floating[:, ::1] out):
    cdef Py_ssize_t i, j, rows = x.shape[0], n = x.shape[1]
    cdef double m, s
    for i in range(rows):
        m = x[i, 0]
        for j in range(1, n):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(n):
            out[i, j] = <cython.floating>exp(x[i, j] - m)
            s += out[i, j]
        for j in range(n):
            out[i, j] = <cython.floating>(out[i, j] / s)


def softmax_bwd_into(cython.floating[:, ::1] y, cython.floating[:, ::1] gy,
                     cython.floating[:, ::1] out):
    cdef Py_ssize_t i, j, rows = y.shape[0], n = y.shape[1]
    cdef double inner
    for i in range(rows):
        inner = 0.0
        for j in range(n):
            inner += gy[i, j] * y[i, j]
        for j in range(n):
            out[i, j] = <cython.floating>(y[i, j] * (gy[i, j] - inner))


def logsumexp_fwd_into(cython.floating[:, ::1] x, cython.floating[::1] lse):
    cdef Py_ssize_t i, j, rows = x.shape[0], n = x.shape[1]
    cdef double m, s
    for i in range(rows):
        m = x[i, 0]
        for j in range(1, n):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(n):
            s += exp(x[i, j] - m)
        lse[i] = <cython.floating>(log(s) + m)


def logsumexp_bwd_into(cython.floating[:, ::1] x, cython.floating[::1] lse,
                       cython.floating[::1] gy, cython.floating[:, ::1] out):
    cdef Py_ssize_t i, j, rows = x.shape[0], n = x.shape[1]
    for i in range(rows):
        for j in range(n):
            out[i, j] = <cython.floating>(exp(x[i, j] - lse[i]) * gy[i])


def layernorm_fwd_into(cython.floating[:, ::1] x, cython.floating[::1] gain,
                       cython.floating[::1] bias, double eps,
                       cython.floating[:, ::1] y, cython.floating[:, ::1] xhat,
                       cython.floating[::1] inv_std):
    cdef Py_ssize_t i, j, rows = x.shape[0], n = x.shape[1]
    cdef double mu, var, d, istd
    for i in range(rows):
        mu = 0.0
        for j in range(n):
            mu += x[i, j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mu
            var += d * d
        var /= n
        istd = 1.0 / sqrt(var + eps)
        inv_std[i] = <cython.floating>istd
        for j in range(n):
            xhat[i, j] = <cython.floating>((x[i, j] - mu) * istd)
            y[i, j] = <cython.floating>(xhat[i, j] * gain[j] + bias[j])


def layernorm_bwd_into(cython.floating[:, ::1] xhat, cython.floating[::1] inv_std,
                       cython.floating[::1] gain, cython.floating[:, ::1] gy,
                       cython.floating[:, ::1] gx, cython.floating[::1] ggain,
                       cython.floating[::1] gbias):
    cdef Py_ssize_t i, j, rows = xhat.shape[0], n = xhat.shape[1]
    cdef double m1, m2, gh
    for j in range(n):
        ggain[j] = 0.0
        gbias[j] = 0.0
    for i in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(n):
            gh = gy[i, j] * gain[j]
            m1 += gh
            m2 += gh * xhat[i, j]
        m1 /= n
        m2 /= n
        for j in range(n):
            gh = gy[i, j] * gain[j]
            gx[i, j] = <cython.floating>(inv_std[i] * (gh - m1 - xhat[i, j] * m2))
            ggain[j] += <cython.floating>(gy[i, j] * xhat[i, j])
            gbias[j] += gy[i, j]
