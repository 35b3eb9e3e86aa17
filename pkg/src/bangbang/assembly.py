"""P1/P0 finite element assembly, quadrature, Pi_h projection and the sparse solver.

Quadrature conventions
----------------------
* coefficient functions a_ij, a_0: one-point (barycenter) rule;
* P0 x P1 x P1 products (control coupling, mass): exact element matrices;
* the nonlinearity b and its derivatives: 3-point degree-2 rule (``RULE_Q3``);
* data that may jump along straight lines (source, target, Pi_h): when the jump
  lines are declared as ``interfaces``, elements cut by one of them are clipped
  into convex pieces along the lines and each piece gets the degree-4 rule, so
  piecewise polynomials of degree <= 4 are integrated exactly; uncut elements
  use the plain degree-4 rule.  Without declared lines every element gets the
  degree-4 rule on its 16 sub-triangles of two red refinements (``RULE_COMPOSITE``).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from . import kernels
from .geometry import clip_halfplane, polygon_area
from .mesh import ControlRegion, Mesh

_MASS_REF = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


# --------------------------------------------------------------------------
# quadrature rules on the reference triangle (barycentric points, weights sum to 1)

@dataclass(frozen=True)
class Rule:
    bary: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def size(self) -> int:
        return len(self.weights)

    def points(self, vertices: np.ndarray) -> np.ndarray:
        """Physical points, (E, Q, 2) for element vertices (E, 3, 2)."""
        return np.matmul(self.bary, vertices)


def _sym_rule(groups, degree):
    bary, w = [], []
    for kind, weight, a in groups:
        if kind == "s3":
            bary.append([1 / 3, 1 / 3, 1 / 3])
            w.append(weight)
        else:
            b = 1.0 - 2.0 * a
            for p in ([b, a, a], [a, b, a], [a, a, b]):
                bary.append(p)
                w.append(weight)
    return Rule(np.array(bary), np.array(w), degree)


RULE_CENTROID = _sym_rule([("s3", 1.0, None)], 1)
RULE_Q3 = _sym_rule([("s21", 1 / 3, 1 / 6)], 2)
RULE_D6 = _sym_rule([
    ("s21", 0.223381589678011466, 0.445948490915964886),
    ("s21", 0.109951743655321868, 0.091576213509770743),
], 4)
RULE_D7 = _sym_rule([
    ("s3", 0.225, None),
    ("s21", 0.132394152788506181, 0.470142064105115090),
    ("s21", 0.125939180544827153, 0.101286507323456339),
], 5)


def composite(rule: Rule, levels: int) -> Rule:
    """Apply `rule` on each of the 4**levels sub-triangles of repeated red refinement."""
    tris = [np.eye(3)]
    for _ in range(levels):
        nxt = []
        for t in tris:
            a, b, c = t
            ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
            nxt += [np.array([a, ab, ca]), np.array([ab, b, bc]),
                    np.array([ca, bc, c]), np.array([ab, bc, ca])]
        tris = nxt
    bary = np.concatenate([rule.bary @ t for t in tris])
    weights = np.concatenate([rule.weights / len(tris)] * len(tris))
    return Rule(bary, weights, rule.degree)


RULE_COMPOSITE = composite(RULE_D6, 2)


# --------------------------------------------------------------------------
# fields

class StateField:
    """Continuous piecewise linear field given by nodal values."""

    def __init__(self, mesh: Mesh, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (mesh.n_nodes,):
            raise ValueError(f"expected {mesh.n_nodes} nodal values, got shape {values.shape}")
        self.mesh = mesh
        self.values = values

    def __repr__(self):
        return f"StateField(n={len(self.values)}, max|.|={np.abs(self.values).max():.3g})"

    def at_rule(self, rule: Rule) -> np.ndarray:
        """Values at the quadrature points of every element, shape (E, Q)."""
        return kernels.p1_at_points(self.values, self.mesh.elements, rule.bary)

    def evaluate(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        el = self.mesh.locate(pts)
        v = self.mesh.vertices[el]
        lam = _barycentric(v, pts)
        return np.einsum("pk,pk->p", lam, self.values[self.mesh.elements[el]])


def _barycentric(v, pts):
    x0 = v[:, 0]
    d1, d2 = v[:, 1] - x0, v[:, 2] - x0
    r = pts - x0
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    l1 = (r[:, 0] * d2[:, 1] - r[:, 1] * d2[:, 0]) / det
    l2 = (d1[:, 0] * r[:, 1] - d1[:, 1] * r[:, 0]) / det
    return np.column_stack([1.0 - l1 - l2, l1, l2])


class ControlField:
    """Piecewise constant field on the control elements of a ControlRegion."""

    def __init__(self, region: ControlRegion, values):
        values = np.asarray(values, dtype=float)
        if np.ndim(values) == 0:
            values = np.full(region.size, float(values))
        if values.shape != (region.size,):
            raise ValueError(f"expected {region.size} element values, got shape {values.shape}")
        self.region = region
        self.values = values

    def __repr__(self):
        return f"ControlField(n={len(self.values)})"

    def with_values(self, values) -> "ControlField":
        return ControlField(self.region, values)

    def __add__(self, other):
        _check_same_region(self, other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other):
        _check_same_region(self, other)
        return self.with_values(self.values - other.values)

    def __mul__(self, s):
        return self.with_values(self.values * float(s))

    __rmul__ = __mul__

    def l1_norm(self) -> float:
        return float(np.dot(self.region.areas, np.abs(self.values)))

    def lp_norm(self, p: float) -> float:
        return float(np.dot(self.region.areas, np.abs(self.values) ** p) ** (1.0 / p))

    def inner(self, other) -> float:
        _check_same_region(self, other)
        return float(np.dot(self.region.areas, self.values * other.values))

    def on_mesh(self) -> np.ndarray:
        """Element values on the whole mesh, zero outside the control region."""
        out = np.zeros(self.region.mesh.n_elements)
        out[self.region.element_ids] = self.values
        return out


def _check_same_region(a: ControlField, b: ControlField):
    if a.region is not b.region and a.region.mesh is not b.region.mesh:
        raise ValueError("control fields live on different meshes")


# --------------------------------------------------------------------------
# coefficients and nonlinearity

@dataclass(frozen=True)
class Nonlinearity:
    """Monotone nonlinearity b(x, y) with its first two y-derivatives.

    All three callables take points (P, 2) and values (P,) and return (P,).
    """

    name: str
    b: Callable
    db: Callable
    d2b: Callable


def _zeros(x, y):
    return np.zeros_like(y)


ZERO = Nonlinearity("zero", _zeros, _zeros, _zeros)
LINEAR = Nonlinearity("linear", lambda x, y: y, lambda x, y: np.ones_like(y), _zeros)
CUBIC = Nonlinearity("cubic", lambda x, y: y ** 3, lambda x, y: 3.0 * y ** 2, lambda x, y: 6.0 * y)
NONLINEARITIES = {nl.name: nl for nl in (ZERO, LINEAR, CUBIC)}


def _diffusion_at(mesh: Mesh, diffusion) -> np.ndarray:
    if diffusion is None:
        return np.broadcast_to(np.eye(2), (mesh.n_elements, 2, 2)).copy()
    a = np.asarray(diffusion(mesh.barycenters), dtype=float)
    return np.broadcast_to(a, (mesh.n_elements, 2, 2)).copy()


def ellipticity_constant(mesh: Mesh, diffusion=None) -> float:
    """Smallest eigenvalue of the symmetric part of a_ij over element barycenters."""
    a = _diffusion_at(mesh, diffusion)
    s = 0.5 * (a + np.swapaxes(a, 1, 2))
    p, q, r = s[:, 0, 0], s[:, 0, 1], s[:, 1, 1]
    lam = 0.5 * (p + r) - np.sqrt(0.25 * (p - r) ** 2 + q ** 2)
    return float(lam.min())


# --------------------------------------------------------------------------
# matrices and vectors

def _csr(mesh: Mesh, data) -> sp.csr_matrix:
    indptr, indices, _ = mesh.csr_pattern
    n = mesh.n_nodes
    return sp.csr_matrix((data, indices, indptr), shape=(n, n))


def assemble_local(mesh: Mesh, local: np.ndarray, element_ids=None) -> sp.csr_matrix:
    """Sum (E, 3, 3) element matrices into a CSR matrix on the P1 pattern."""
    indptr, indices, slots = mesh.csr_pattern
    if element_ids is not None:
        slots = slots[element_ids]
    return _csr(mesh, kernels.scatter_add(slots, local, len(indices)))


def assemble_stiffness(mesh: Mesh, diffusion=None, reaction=None) -> sp.csr_matrix:
    """Matrix of a(phi_j, phi_i) = int sum a_pq d_p phi_j d_q phi_i + a0 phi_j phi_i."""
    a = _diffusion_at(mesh, diffusion)
    lam = ellipticity_constant(mesh, diffusion)
    if not lam > 0.0:
        raise ValueError(f"diffusion coefficient is not uniformly elliptic (min eigenvalue {lam:.3g})")
    local = kernels.stiffness_local(mesh.gradients, mesh.element_areas, a)
    if reaction is not None:
        a0 = np.broadcast_to(np.asarray(reaction(mesh.barycenters), dtype=float), (mesh.n_elements,))
        if np.any(a0 < 0.0):
            raise ValueError("reaction coefficient a0 must be nonnegative")
        local = local + (a0 * mesh.element_areas)[:, None, None] * _MASS_REF
    return assemble_local(mesh, local)


def assemble_mass(mesh: Mesh) -> sp.csr_matrix:
    local = mesh.element_areas[:, None, None] * _MASS_REF
    return assemble_local(mesh, local)


def assemble_control_coupling(u: ControlField, mesh: Mesh | None = None) -> sp.csr_matrix:
    """Matrix with entries int_{omega_h} u phi_j phi_i (exact for P0 u)."""
    region = u.region
    if mesh is not None and mesh is not region.mesh:
        raise ValueError("control field belongs to a different mesh")
    local = (u.values * region.areas)[:, None, None] * _MASS_REF
    return assemble_local(region.mesh, local, region.element_ids)


def coupling_times(u_values, region: ControlRegion, y_values) -> np.ndarray:
    """Vector int_{omega_h} u y_h phi_i without forming the matrix."""
    mesh = region.mesh
    el = mesh.elements[region.element_ids]
    local = (u_values * region.areas)[:, None] * (y_values[el] @ _MASS_REF)
    return kernels.scatter_vector(el, local, mesh.n_nodes)


def element_product_means(region: ControlRegion, f_values, g_values) -> np.ndarray:
    """Element means of f_h g_h over the control elements (exact for P1 x P1)."""
    el = region.mesh.elements[region.element_ids]
    return np.einsum("ei,ij,ej->e", f_values[el], _MASS_REF, g_values[el])


_CHUNK = 1 << 15


def _values_at_rule(f: Callable, vertices: np.ndarray, rule: Rule) -> np.ndarray:
    """f at the quadrature points of every element, (E, Q), evaluated in element chunks."""
    out = np.empty((len(vertices), rule.size))
    for s in range(0, len(vertices), _CHUNK):
        pts = rule.points(vertices[s:s + _CHUNK])
        out[s:s + _CHUNK] = np.asarray(f(pts.reshape(-1, 2)), dtype=float).reshape(pts.shape[:2])
    return out


def cut_elements(vertices: np.ndarray, interfaces, tol: float = 1e-12) -> np.ndarray:
    """Mask of elements whose interior meets one of the lines n . x = c in `interfaces`."""
    cut = np.zeros(len(vertices), dtype=bool)
    for nx, ny, c in interfaces:
        d = vertices[..., 0] * nx + vertices[..., 1] * ny - c
        cut |= (d.min(axis=1) < -tol) & (d.max(axis=1) > tol)
    return cut


def _fan(poly):
    """Triangles (k, 3, 2) of a convex polygon fanned from its first vertex."""
    p = np.asarray(poly)
    return np.stack([np.broadcast_to(p[0], (len(p) - 2, 2)), p[1:-1], p[2:]], axis=1)


def clipped_points(vertices: np.ndarray, interfaces, rule: Rule = None):
    """Quadrature on elements split along the interface lines.

    Every element is cut into the convex pieces between the lines, each piece
    is fanned into triangles carrying `rule` (degree 4 by default).  Returns
    (element index, barycentric coordinates in the parent, weight) per point,
    the weights of one element summing to 1.
    """
    rule = rule or RULE_D6
    owners, bary, weights = [], [], []
    for e, tri in enumerate(vertices):
        pieces = [list(tri)]
        for nx, ny, c in interfaces:
            nxt = []
            for poly in pieces:
                for sgn in (1.0, -1.0):
                    part = clip_halfplane(poly, (sgn * nx, sgn * ny), sgn * c)
                    if len(part) >= 3 and abs(polygon_area(part)) > 0.0:
                        nxt.append(part)
            pieces = nxt
        area = abs(polygon_area(tri))
        for poly in pieces:
            for sub in _fan(poly):
                a = abs(polygon_area(sub))
                if a == 0.0:
                    continue
                pts = rule.bary @ sub
                owners.append(np.full(rule.size, e))
                bary.append(_barycentric(np.broadcast_to(tri, (rule.size, 3, 2)), pts))
                weights.append(rule.weights * a / area)
    if not owners:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros(0)
    return np.concatenate(owners), np.concatenate(bary), np.concatenate(weights)


def _clipped_values(f: Callable, vertices: np.ndarray, interfaces):
    owner, bary, w = clipped_points(vertices, interfaces)
    pts = np.einsum("pk,pkd->pd", bary, vertices[owner])
    return owner, bary, w, np.asarray(f(pts), dtype=float)


def element_integrals(vertices: np.ndarray, areas: np.ndarray, f: Callable,
                      rule: Rule = RULE_COMPOSITE, interfaces=None) -> np.ndarray:
    """int_T f for every element T."""
    if interfaces is None or rule is not RULE_COMPOSITE:
        return areas * (_values_at_rule(f, vertices, rule) @ rule.weights)
    out = np.empty(len(vertices))
    cut = cut_elements(vertices, interfaces)
    out[~cut] = areas[~cut] * (_values_at_rule(f, vertices[~cut], RULE_D6) @ RULE_D6.weights)
    idx = np.flatnonzero(cut)
    owner, _, w, vals = _clipped_values(f, vertices[idx], interfaces)
    out[idx] = areas[idx] * np.bincount(owner, weights=w * vals, minlength=len(idx))
    return out


def assemble_load(mesh: Mesh, f: Callable, rule: Rule = RULE_COMPOSITE, interfaces=None) -> np.ndarray:
    """Vector int f phi_i for an evaluable f(points (P, 2)) -> (P,)."""
    areas = mesh.element_areas
    if interfaces is None or rule is not RULE_COMPOSITE:
        vals = _values_at_rule(f, mesh.vertices, rule)
        local = kernels.weighted_load_local(areas, vals, rule.bary, rule.weights)
        return kernels.scatter_vector(mesh.elements, local, mesh.n_nodes)
    local = np.empty((mesh.n_elements, 3))
    cut = cut_elements(mesh.vertices, interfaces)
    vals = _values_at_rule(f, mesh.vertices[~cut], RULE_D6)
    local[~cut] = kernels.weighted_load_local(areas[~cut], vals, RULE_D6.bary, RULE_D6.weights)
    idx = np.flatnonzero(cut)
    owner, bary, w, vals = _clipped_values(f, mesh.vertices[idx], interfaces)
    for i in range(3):
        local[idx, i] = areas[idx] * np.bincount(owner, weights=w * vals * bary[:, i], minlength=len(idx))
    return kernels.scatter_vector(mesh.elements, local, mesh.n_nodes)


def integrate(mesh: Mesh, f: Callable, rule: Rule = RULE_COMPOSITE, interfaces=None) -> float:
    return float(element_integrals(mesh.vertices, mesh.element_areas, f, rule, interfaces).sum())


def _a2_screen(db_vals):
    if np.any(db_vals < 0.0):
        raise ValueError(f"nonlinearity violates monotonicity: b' = {db_vals.min():.3g} < 0")


def assemble_semilinear(y: StateField, b: Nonlinearity, derivative_order: int,
                        z1: StateField | None = None, z2: StateField | None = None,
                        rule: Rule = RULE_Q3):
    """Terms of the nonlinearity, integrated with `rule` on every element.

    order 0: vector int b(., y_h) phi_i
    order 1: matrix int b'(., y_h) phi_j phi_i
    order 2: vector int b''(., y_h) z1 z2 phi_i
    """
    mesh = y.mesh
    pts = rule.points(mesh.vertices).reshape(-1, 2)
    shape = (mesh.n_elements, rule.size)
    yq = y.at_rule(rule).ravel()
    if derivative_order in (0, 1):
        db = np.asarray(b.db(pts, yq), dtype=float)
        _a2_screen(db)
    if derivative_order == 0:
        vals = np.asarray(b.b(pts, yq), dtype=float).reshape(shape)
        local = kernels.weighted_load_local(mesh.element_areas, vals, rule.bary, rule.weights)
        return kernels.scatter_vector(mesh.elements, local, mesh.n_nodes)
    if derivative_order == 1:
        local = kernels.weighted_mass_local(mesh.element_areas, db.reshape(shape), rule.bary, rule.weights)
        return assemble_local(mesh, local)
    if derivative_order == 2:
        if z1 is None or z2 is None:
            raise ValueError("second-order terms need two sensitivity fields")
        d2b = np.asarray(b.d2b(pts, yq), dtype=float).reshape(shape)
        vals = d2b * z1.at_rule(rule) * z2.at_rule(rule)
        local = kernels.weighted_load_local(mesh.element_areas, vals, rule.bary, rule.weights)
        return kernels.scatter_vector(mesh.elements, local, mesh.n_nodes)
    raise ValueError(f"derivative_order must be 0, 1 or 2, got {derivative_order}")


def semilinear_increment(y: StateField, d: StateField, b: Nonlinearity, rule: Rule = RULE_Q3,
                         nodes: int = 3) -> np.ndarray:
    """Vector int (b(., y_h + d_h) - b(., y_h)) phi_i, accurate relative to d_h.

    Uses b(y + d) - b(y) = d int_0^1 b'(y + s d) ds with Gauss-Legendre in s,
    exact for polynomial b of degree <= 2 nodes.
    """
    mesh = y.mesh
    pts = rule.points(mesh.vertices).reshape(-1, 2)
    yq, dq = y.at_rule(rule).ravel(), d.at_rule(rule).ravel()
    s, w = np.polynomial.legendre.leggauss(nodes)
    s, w = 0.5 * (s + 1.0), 0.5 * w
    mean_db = sum(wk * np.asarray(b.db(pts, yq + sk * dq), dtype=float) for sk, wk in zip(s, w))
    vals = (dq * mean_db).reshape(mesh.n_elements, rule.size)
    local = kernels.weighted_load_local(mesh.element_areas, vals, rule.bary, rule.weights)
    return kernels.scatter_vector(mesh.elements, local, mesh.n_nodes)


def project_Pi_h(u: Callable, region: ControlRegion, rule: Rule = RULE_COMPOSITE,
                 interfaces=None) -> ControlField:
    """Element averages (1/|T|) int_T u over the control elements."""
    ints = element_integrals(region.vertices, region.areas, u, rule, interfaces)
    return ControlField(region, ints / region.areas)


# --------------------------------------------------------------------------
# Dirichlet conditions and the linear solver

def apply_dirichlet(A: sp.spmatrix, rhs, nodes, values=0.0):
    """Eliminate Dirichlet rows and columns, leaving 1 on their diagonal."""
    A = sp.csr_matrix(A)
    n = A.shape[0]
    g = np.zeros(n)
    g[nodes] = values
    keep = np.ones(n)
    keep[nodes] = 0.0
    K = sp.diags(keep)
    rhs = np.asarray(rhs, dtype=float) - A @ g
    rhs = keep * rhs + g
    A = (K @ A @ K + sp.diags(1.0 - keep)).tocsr()
    A.sort_indices()
    return A, rhs


class SolverError(RuntimeError):
    pass


class IndefiniteMatrixError(SolverError):
    def __init__(self, index: int, pivot: float):
        super().__init__(f"matrix is not positive definite: pivot {pivot:.3e} at row {index}")
        self.index = index
        self.pivot = pivot


class Factorization:
    """Sparse direct factorization with residual control.

    Symmetric matrices are factored with symmetric ordering and diagonal
    pivots, so the pivots certify positive definiteness.
    """

    def __init__(self, A: sp.spmatrix, rtol: float = 1e-11, require_spd: bool | None = None):
        A = sp.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"matrix must be square, got {A.shape}")
        self.A = A
        self.rtol = rtol
        asym = abs(A - A.T).max() if A.nnz else 0.0
        self.symmetric = asym <= 1e-14 * max(abs(A).max(), 1.0)
        spd = self.symmetric if require_spd is None else require_spd
        try:
            if self.symmetric:
                self.lu = sla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                   options={"SymmetricMode": True})
            else:
                self.lu = sla.splu(A)
        except RuntimeError as exc:
            raise SolverError(f"factorization failed: {exc}") from exc
        if spd:
            if not self.symmetric:
                raise SolverError("matrix is not symmetric")
            d = self.lu.U.diagonal()
            k = int(np.argmin(d))
            if not d[k] > 0.0:
                raise IndefiniteMatrixError(int(np.flatnonzero(self.lu.perm_c == k)[0]), float(d[k]))

    def solve(self, rhs, transpose: bool = False) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        A = self.A.T if transpose else self.A
        trans = "T" if transpose else "N"
        x = self.lu.solve(rhs, trans=trans)
        scale = np.linalg.norm(rhs)
        for _ in range(3):
            r = rhs - A @ x
            if np.linalg.norm(r) <= self.rtol * scale:
                return x
            x = x + self.lu.solve(r, trans=trans)
        res = np.linalg.norm(rhs - A @ x)
        if res > self.rtol * scale:
            raise SolverError(f"residual {res:.3e} exceeds {self.rtol:.1e} * |rhs| = {self.rtol * scale:.3e}")
        return x


def solve_sparse(M: sp.spmatrix, rhs, rtol: float = 1e-11) -> np.ndarray:
    return Factorization(M, rtol).solve(rhs)
