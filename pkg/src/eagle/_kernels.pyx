# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Mirrors ``eagle._kernels_py`` up to floating-point summation order."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()


def jacobi_sweeps(double[:, ::1] at, double[:, ::1] vt, double tol, int max_sweeps):
    """One-sided Jacobi rotations applied in place.

    ``at`` holds the working matrix transposed (one column per row), ``vt``
    accumulates the right rotations the same way. Returns the number of sweeps
    performed.
    """
    cdef Py_ssize_t n = at.shape[0]
    cdef Py_ssize_t m = at.shape[1]
    cdef Py_ssize_t nv = vt.shape[1]
    cdef Py_ssize_t p, q, k
    cdef double alpha, beta, gamma, zeta, t, c, s, x, y
    cdef int sweep = 0
    cdef int rotated = 1
    while rotated and sweep < max_sweeps:
        rotated = 0
        sweep += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for k in range(m):
                    x = at[p, k]
                    y = at[q, k]
                    alpha += x * x
                    beta += y * y
                    gamma += x * y
                if gamma == 0.0 or fabs(gamma) <= tol * sqrt(alpha * beta):
                    continue
                rotated = 1
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for k in range(m):
                    x = at[p, k]
                    y = at[q, k]
                    at[p, k] = c * x - s * y
                    at[q, k] = s * x + c * y
                for k in range(nv):
                    x = vt[p, k]
                    y = vt[q, k]
                    vt[p, k] = c * x - s * y
                    vt[q, k] = s * x + c * y
    return sweep


def patch_coverage(const unsigned char[:, ::1] mask, int patch):
    cdef Py_ssize_t h = mask.shape[0]
    cdef Py_ssize_t w = mask.shape[1]
    cdef Py_ssize_t gw = w // patch
    cdef Py_ssize_t gh = h // patch
    cdef Py_ssize_t i, j
    cdef cnp.ndarray[cnp.int64_t, ndim=1] counts = np.zeros(gh * gw, dtype=np.int64)
    for i in range(h):
        for j in range(w):
            if mask[i, j]:
                counts[(i // patch) * gw + j // patch] += 1
    return counts / float(patch * patch)
