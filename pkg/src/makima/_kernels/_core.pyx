# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel core: float32 matmul and row softmax.

Accumulation is float64 with a fixed loop order (ascending inner index per
output element), so results are bit-stable run to run and independent of
caller-side threading. Both kernels release the GIL.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

NAME = "compiled"


def matmul(const float[:, ::1] a, const float[:, ::1] b):
    """Matrix product of float32 [R,D] x [D,C] -> float32 [R,C]."""
    cdef Py_ssize_t R = a.shape[0]
    cdef Py_ssize_t D = a.shape[1]
    cdef Py_ssize_t C = b.shape[1]
    out = np.empty((R, C), dtype=np.float32)
    acc = np.empty(C, dtype=np.float64)
    cdef float[:, ::1] o = out
    cdef double[::1] row = acc
    cdef Py_ssize_t i, j, k
    cdef double aik
    with nogil:
        for i in range(R):
            for j in range(C):
                row[j] = 0.0
            for k in range(D):
                aik = <double> a[i, k]
                for j in range(C):
                    row[j] += aik * <double> b[k, j]
            for j in range(C):
                o[i, j] = <float> row[j]
    return out


def softmax_rows(const float[:, ::1] x):
    """Row softmax of a float32 [R,C] matrix with max subtraction."""
    cdef Py_ssize_t R = x.shape[0]
    cdef Py_ssize_t C = x.shape[1]
    out = np.empty((R, C), dtype=np.float32)
    buf = np.empty(C, dtype=np.float64)
    cdef float[:, ::1] o = out
    cdef double[::1] e = buf
    cdef Py_ssize_t i, j
    cdef double m, s, inv
    with nogil:
        for i in range(R):
            m = <double> x[i, 0]
            for j in range(1, C):
                if <double> x[i, j] > m:
                    m = <double> x[i, j]
            s = 0.0
            for j in range(C):
                e[j] = exp(<double> x[i, j] - m)
                s += e[j]
            inv = 1.0 / s
            for j in range(C):
                o[i, j] = <float> (e[j] * inv)
    return out
