# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Must stay arithmetically identical to _pykernels."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def levenshtein(const long long[::1] a, const long long[::1] b):
    cdef Py_ssize_t m = a.shape[0], n = b.shape[0], i, j
    cdef long long prev, tmp, best
    cdef long long[::1] row = np.arange(n + 1, dtype=np.int64)
    for i in range(1, m + 1):
        prev = row[0]
        row[0] = i
        for j in range(1, n + 1):
            tmp = row[j]
            if a[i - 1] == b[j - 1]:
                row[j] = prev
            else:
                best = prev
                if row[j] < best:
                    best = row[j]
                if row[j - 1] < best:
                    best = row[j - 1]
                row[j] = best + 1
            prev = tmp
    return int(row[n])


def resonator(const double[::1] x, const double[::1] gain,
              const double[::1] a1, const double[::1] a2):
    cdef Py_ssize_t n = x.shape[0], k
    cdef double y1 = 0.0, y2 = 0.0, y
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for k in range(n):
        y = gain[k] * x[k] + a1[k] * y1 + a2[k] * y2
        o[k] = y
        y2 = y1
        y1 = y
    return out
