"""Pure numpy element kernels; reference behaviour for the compiled module."""
import numpy as np


def scatter_add(slots, local, nnz):
    return np.bincount(np.asarray(slots).ravel(), weights=np.asarray(local).ravel(), minlength=nnz)


def scatter_vector(elements, local, n):
    return np.bincount(np.asarray(elements).ravel(), weights=np.asarray(local).ravel(), minlength=n)


def stiffness_local(grads, areas, coeff):
    # K[e, i, j] = |T| grad(phi_j) . A grad(phi_i)
    return np.einsum("e,ejp,epq,eiq->eij", areas, grads, coeff, grads, optimize=True)


def weighted_mass_local(areas, wvals, phi, qw):
    return np.einsum("e,q,eq,qi,qj->eij", areas, qw, wvals, phi, phi, optimize=True)


def weighted_load_local(areas, vals, phi, qw):
    return np.einsum("e,q,eq,qi->ei", areas, qw, vals, phi, optimize=True)


def p1_at_points(nodal, elements, phi):
    return np.asarray(nodal)[elements] @ np.asarray(phi).T
