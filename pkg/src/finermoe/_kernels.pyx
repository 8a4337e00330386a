# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled matrix-multiply kernels.

Every output element is a dot product accumulated in ascending index
order, so results are independent of the thread schedule and bit-identical
to the NumPy fallback in ``_kernels_py`` (which performs the same sequence
of IEEE roundings). Compile with -ffp-contract=off; FMA fusion would break
that equivalence.
"""

from cython.parallel import prange

BACKEND = "compiled"


def matmul_f32(const float[:, ::1] a, const float[:, ::1] b, float[:, ::1] out,
               bint acc64, int threads):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, j, p
    cdef float accf
    cdef double accd
    if threads < 1:
        threads = 1
    if acc64:
        for i in prange(m, nogil=True, num_threads=threads, schedule='static'):
            for j in range(n):
                accd = 0.0
                for p in range(k):
                    accd = accd + (<double> a[i, p]) * (<double> b[p, j])
                out[i, j] = <float> accd
    else:
        for i in prange(m, nogil=True, num_threads=threads, schedule='static'):
            for j in range(n):
                accf = 0.0
                for p in range(k):
                    accf = accf + a[i, p] * b[p, j]
                out[i, j] = accf


def matmul_f64(const double[:, ::1] a, const double[:, ::1] b, double[:, ::1] out,
               int threads):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, j, p
    cdef double acc
    if threads < 1:
        threads = 1
    for i in prange(m, nogil=True, num_threads=threads, schedule='static'):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc = acc + a[i, p] * b[p, j]
            out[i, j] = acc
