# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: fused GELU (tanh form, tanh evaluated through exp)
and its first two derivatives, plus the scalar error recurrences used by the
stability scans.

Mirrors ``_kernels_py`` operation for operation. No fast-math: the recurrences
must stay bit-identical to the fallback.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs, INFINITY

cnp.import_array()

cdef double SQRT_2_OVER_PI = 0.7978845608028654
cdef double GELU_CUBIC = 0.044715


def gelu(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    res = np.empty_like(arr)
    cdef const double[::1] flat = arr.reshape(-1)
    cdef double[::1] out = res.reshape(-1)
    cdef Py_ssize_t i, n = flat.shape[0]
    cdef double v, u
    for i in range(n):
        v = flat[i]
        u = SQRT_2_OVER_PI * (v + GELU_CUBIC * v * v * v)
        out[i] = v - v / (1.0 + exp(2.0 * u))
    return res.reshape(np.shape(x))


def gelu_grad(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    res = np.empty_like(arr)
    cdef const double[::1] flat = arr.reshape(-1)
    cdef double[::1] out = res.reshape(-1)
    cdef Py_ssize_t i, n = flat.shape[0]
    cdef double v, v2, u, du, t
    for i in range(n):
        v = flat[i]
        v2 = v * v
        u = SQRT_2_OVER_PI * (v + GELU_CUBIC * v2 * v)
        du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * v2)
        t = 1.0 - 2.0 / (1.0 + exp(2.0 * u))
        out[i] = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
    return res.reshape(np.shape(x))


def gelu_grad2(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    res = np.empty_like(arr)
    cdef const double[::1] flat = arr.reshape(-1)
    cdef double[::1] out = res.reshape(-1)
    cdef Py_ssize_t i, n = flat.shape[0]
    cdef double v, v2, u, du, ddu, t, s
    for i in range(n):
        v = flat[i]
        v2 = v * v
        u = SQRT_2_OVER_PI * (v + GELU_CUBIC * v2 * v)
        du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * v2)
        ddu = SQRT_2_OVER_PI * 6.0 * GELU_CUBIC * v
        t = 1.0 - 2.0 / (1.0 + exp(2.0 * u))
        s = 1.0 - t * t
        out[i] = s * (du + 0.5 * v * (ddu - 2.0 * t * du * du))
    return res.reshape(np.shape(x))


def explicit_errors(double gl, double eta, int n, double cutoff):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n + 1)
    cdef double e = eta
    cdef int k
    out[0] = e
    for k in range(n):
        e = e + gl * e
        out[k + 1] = e
        if fabs(e) > cutoff:
            return out[:k + 2].copy(), True
    return out, False


def implicit_errors(double gl, double eta, int n, double cutoff):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n + 1)
    cdef double e = eta
    cdef double denom = 1.0 - gl
    cdef int k
    out[0] = e
    for k in range(n):
        e = e / denom
        out[k + 1] = e
        if fabs(e) > cutoff:
            return out[:k + 2].copy(), True
    return out, False


def scan_final_errors(lambdas, gammas, double eta, int n, bint implicit, double cutoff):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] lam = np.ascontiguousarray(lambdas, dtype=np.float64).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gam = np.ascontiguousarray(gammas, dtype=np.float64).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((lam.shape[0], gam.shape[0]))
    cdef Py_ssize_t i, j
    cdef int k
    cdef double gl, e, denom
    for i in range(lam.shape[0]):
        for j in range(gam.shape[0]):
            gl = gam[j] * lam[i]
            e = eta
            if implicit:
                denom = 1.0 - gl
                for k in range(n):
                    e = e / denom
                    if fabs(e) > cutoff:
                        e = INFINITY
                        break
            else:
                for k in range(n):
                    e = e + gl * e
                    if fabs(e) > cutoff:
                        e = INFINITY
                        break
            out[i, j] = fabs(e)
    return out
