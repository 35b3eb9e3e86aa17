# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled element kernels.  Same signatures and loop order as _kernels_py."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def scatter_add(const cnp.int64_t[:, ::1] slots, const double[:, :, ::1] local, Py_ssize_t nnz):
    cdef Py_ssize_t e, i, j
    cdef double[::1] out = np.zeros(nnz)
    for e in range(slots.shape[0]):
        for i in range(3):
            for j in range(3):
                out[slots[e, 3 * i + j]] += local[e, i, j]
    return np.asarray(out)


def scatter_vector(const cnp.int64_t[:, ::1] elements, const double[:, ::1] local, Py_ssize_t n):
    cdef Py_ssize_t e, i
    cdef double[::1] out = np.zeros(n)
    for e in range(elements.shape[0]):
        for i in range(3):
            out[elements[e, i]] += local[e, i]
    return np.asarray(out)


def stiffness_local(const double[:, :, ::1] grads, const double[::1] areas,
                    const double[:, :, ::1] coeff):
    cdef Py_ssize_t E = grads.shape[0], e, i, j
    cdef double a00, a01, a10, a11, gx, gy, s
    out_arr = np.empty((E, 3, 3))
    cdef double[:, :, ::1] out = out_arr
    for e in range(E):
        a00 = coeff[e, 0, 0]
        a01 = coeff[e, 0, 1]
        a10 = coeff[e, 1, 0]
        a11 = coeff[e, 1, 1]
        for j in range(3):
            # A^T grad(phi_j) contracted against grad(phi_i)
            gx = grads[e, j, 0] * a00 + grads[e, j, 1] * a10
            gy = grads[e, j, 0] * a01 + grads[e, j, 1] * a11
            for i in range(3):
                s = gx * grads[e, i, 0] + gy * grads[e, i, 1]
                out[e, i, j] = areas[e] * s
    return out_arr


def weighted_mass_local(const double[::1] areas, const double[:, ::1] wvals,
                        const double[:, ::1] phi, const double[::1] qw):
    cdef Py_ssize_t E = wvals.shape[0], Q = wvals.shape[1], e, q, i, j
    cdef double c
    out_arr = np.zeros((E, 3, 3))
    cdef double[:, :, ::1] out = out_arr
    for e in range(E):
        for q in range(Q):
            c = areas[e] * qw[q] * wvals[e, q]
            for i in range(3):
                for j in range(3):
                    out[e, i, j] += c * phi[q, i] * phi[q, j]
    return out_arr


def weighted_load_local(const double[::1] areas, const double[:, ::1] vals,
                        const double[:, ::1] phi, const double[::1] qw):
    cdef Py_ssize_t E = vals.shape[0], Q = vals.shape[1], e, q, i
    cdef double c
    out_arr = np.zeros((E, 3))
    cdef double[:, ::1] out = out_arr
    for e in range(E):
        for q in range(Q):
            c = areas[e] * qw[q] * vals[e, q]
            for i in range(3):
                out[e, i] += c * phi[q, i]
    return out_arr


def p1_at_points(const double[::1] nodal, const cnp.int64_t[:, ::1] elements, const double[:, ::1] phi):
    cdef Py_ssize_t E = elements.shape[0], Q = phi.shape[0], e, q
    out_arr = np.empty((E, Q))
    cdef double[:, ::1] out = out_arr
    cdef double v0, v1, v2
    for e in range(E):
        v0 = nodal[elements[e, 0]]
        v1 = nodal[elements[e, 1]]
        v2 = nodal[elements[e, 2]]
        for q in range(Q):
            out[e, q] = v0 * phi[q, 0] + v1 * phi[q, 1] + v2 * phi[q, 2]
    return out_arr
