# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-iteration kernels; see ``_pykernels`` for the reference."""

from libc.math cimport sqrt, tanh
from libc.stdlib cimport free, malloc
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport daxpy, ddot, dgemm

BACKEND = "cython"


cdef inline double _sigmoid(double z) nogil:
    return 0.5 * (1.0 + tanh(0.5 * z))


cdef inline double _dot(const double* a, const double* b, Py_ssize_t n) nogil:
    cdef int nn = <int>n, one = 1
    return ddot(&nn, <double*>a, &one, <double*>b, &one)


cdef inline void _axpy(double alpha, const double* x, double* y, Py_ssize_t n) nogil:
    cdef int nn = <int>n, one = 1
    daxpy(&nn, &alpha, <double*>x, &one, y, &one)


def logistic_batch_grad(const double[:, ::1] X, const double[::1] y,
                        const long[::1] idx, const double[::1] w, double lam,
                        double[::1] out):
    cdef Py_ssize_t b = idx.shape[0], d = X.shape[1], i, j, r
    cdef double m, s, inv_b = 1.0 / b
    with nogil:
        for j in range(d):
            out[j] = lam * w[j]
        for i in range(b):
            r = idx[i]
            m = _dot(&X[r, 0], &w[0], d)
            s = -y[r] * _sigmoid(-y[r] * m) * inv_b
            _axpy(s, &X[r, 0], &out[0], d)
    return out.base if out.base is not None else out


def hinge_batch_grad(const double[:, ::1] X, const long[::1] labels,
                     const long[::1] idx, const double[::1] W, long num_classes,
                     double lam, double[::1] out):
    # row-major arrays are seen by BLAS as their transposes:
    # scores^T = W Xb^T, then grad += Xb^T coef / b
    cdef Py_ssize_t b = idx.shape[0], d = X.shape[1], i, j, c
    cdef int ib = <int>b, idd = <int>d, ic = <int>num_classes
    cdef double zero = 0.0, one = 1.0, inv_b = 1.0 / b, ys
    cdef char trans = b'T', notrans = b'N'
    cdef double* Xb = <double*>malloc(b * d * sizeof(double))
    cdef double* K = <double*>malloc(b * num_classes * sizeof(double))
    if Xb == NULL or K == NULL:
        free(Xb)
        free(K)
        raise MemoryError()
    with nogil:
        for i in range(b):
            memcpy(&Xb[i * d], &X[idx[i], 0], d * sizeof(double))
        dgemm(&trans, &notrans, &ic, &ib, &idd, &one, <double*>&W[0], &idd, Xb, &idd,
              &zero, K, &ic)
        for i in range(b):
            for c in range(num_classes):
                ys = 1.0 if labels[idx[i]] == c else -1.0
                K[i * num_classes + c] = -ys if ys * K[i * num_classes + c] < 1.0 else 0.0
        for j in range(num_classes * d):
            out[j] = lam * W[j]
        dgemm(&notrans, &trans, &idd, &ic, &ib, &inv_b, Xb, &idd, K, &ic, &one, &out[0], &idd)
    free(Xb)
    free(K)
    return out.base if out.base is not None else out


def quadratic_batch_grad(const double[:, ::1] A, const double[:, ::1] Z,
                         const long[::1] idx, const double[::1] x, double[::1] out):
    cdef Py_ssize_t n = A.shape[0], b = idx.shape[0], i, j
    cdef double acc, inv_b = 1.0 / b
    with nogil:
        for i in range(n):
            out[i] = _dot(&A[i, 0], &x[0], n)
        for i in range(b):
            for j in range(n):
                out[j] += Z[idx[i], j] * inv_b
    return out.base if out.base is not None else out


def clip_and_perturb(const double[::1] g, double clip_bound,
                     const double[::1] direction, double radius, double[::1] out):
    cdef Py_ssize_t n = g.shape[0], j
    cdef double sq = 0.0, norm, scale = 1.0
    with nogil:
        for j in range(n):
            sq += g[j] * g[j]
        norm = sqrt(sq)
        if clip_bound > 0.0 and norm > clip_bound:
            scale = clip_bound / norm
        if radius != 0.0:
            for j in range(n):
                out[j] = g[j] * scale + radius * direction[j]
        else:
            for j in range(n):
                out[j] = g[j] * scale
    return norm


def sgd_step(double[::1] x, double gamma, const double[::1] payload):
    cdef Py_ssize_t n = x.shape[0], j
    with nogil:
        for j in range(n):
            x[j] -= gamma * payload[j]
    return x.base if x.base is not None else x
