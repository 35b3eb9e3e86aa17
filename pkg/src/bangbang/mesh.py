"""Structured triangulations of rectangles and the control sub-triangulation.

Meshes are built from an n x n grid of cells, each cut by the diagonal running
from its lower-left to its upper-right corner.  This pattern is reproduced
exactly by red (4-to-1) refinement, so ``refine_uniform`` maps the n-grid mesh
onto the 2n-grid mesh up to node numbering.
"""
from __future__ import annotations

from functools import cached_property

import numpy as np

from .geometry import Rectangle


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class Mesh:
    """Conforming P1 triangulation.

    Attributes
    ----------
    nodes : (N, 2) float array
    elements : (E, 3) int array, counterclockwise vertex order
    boundary_nodes : sorted int array of node indices on the outer boundary
    domain : the rectangle being triangulated
    """

    def __init__(self, nodes, elements, boundary_nodes, domain: Rectangle):
        self.nodes = _freeze(np.asarray(nodes, dtype=float))
        self.elements = _freeze(np.asarray(elements, dtype=np.int64))
        self.boundary_nodes = _freeze(np.unique(np.asarray(boundary_nodes, dtype=np.int64)))
        self.domain = domain
        if np.any(self.element_areas <= 0.0):
            bad = int(np.argmin(self.element_areas))
            raise ValueError(f"element {bad} has non-positive area")

    def __repr__(self):
        return f"Mesh(nodes={self.n_nodes}, elements={self.n_elements}, h={self.h:.4g})"

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @cached_property
    def vertices(self) -> np.ndarray:
        """(E, 3, 2) vertex coordinates per element."""
        return _freeze(self.nodes[self.elements])

    @cached_property
    def element_areas(self) -> np.ndarray:
        v = self.nodes[self.elements]
        e1 = v[:, 1] - v[:, 0]
        e2 = v[:, 2] - v[:, 0]
        return _freeze(0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]))

    @cached_property
    def barycenters(self) -> np.ndarray:
        return _freeze(self.vertices.mean(axis=1))

    @cached_property
    def diameters(self) -> np.ndarray:
        v = self.vertices
        d = [np.linalg.norm(v[:, i] - v[:, j], axis=1) for i, j in ((0, 1), (1, 2), (2, 0))]
        return _freeze(np.max(d, axis=0))

    @property
    def h(self) -> float:
        return float(self.diameters.max())

    @cached_property
    def inradii(self) -> np.ndarray:
        v = self.vertices
        perim = sum(np.linalg.norm(v[:, i] - v[:, j], axis=1) for i, j in ((0, 1), (1, 2), (2, 0)))
        return _freeze(2.0 * self.element_areas / perim)

    @property
    def quality(self) -> float:
        """max diameter / min inradius, the quasi-uniformity constant of this mesh."""
        return float(self.diameters.max() / self.inradii.min())

    def min_angle(self) -> float:
        v = self.vertices
        angles = []
        for i in range(3):
            a = v[:, (i + 1) % 3] - v[:, i]
            b = v[:, (i + 2) % 3] - v[:, i]
            cos = np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            angles.append(np.arccos(np.clip(cos, -1.0, 1.0)))
        return float(np.min(angles))

    @cached_property
    def gradients(self) -> np.ndarray:
        """(E, 3, 2) constant gradients of the three barycentric hat functions."""
        v = self.vertices
        x, y = v[..., 0], v[..., 1]
        two_area = 2.0 * self.element_areas
        g = np.empty(v.shape)
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            g[:, i, 0] = (y[:, j] - y[:, k]) / two_area
            g[:, i, 1] = (x[:, k] - x[:, j]) / two_area
        return _freeze(g)

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = False
        return _freeze(np.flatnonzero(mask))

    @cached_property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique edges (sorted node pairs) and the (E, 3) element-to-edge map.

        Local edge i of an element joins local vertices i and i+1.
        """
        el = self.elements
        pairs = np.stack([el[:, [0, 1]], el[:, [1, 2]], el[:, [2, 0]]], axis=1).reshape(-1, 2)
        pairs = np.sort(pairs, axis=1)
        uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
        return _freeze(uniq), _freeze(inv.reshape(-1, 3))

    @cached_property
    def csr_pattern(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """CSR structure of the P1 matrix graph and the (E, 9) slot of each local entry."""
        el = self.elements
        n = self.n_nodes
        rows = np.repeat(el, 3, axis=1)
        cols = np.tile(el, (1, 3))
        keys = rows * n + cols
        uniq, slots = np.unique(keys.ravel(), return_inverse=True)
        r = uniq // n
        indices = (uniq % n).astype(np.int64)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, r + 1, 1)
        np.cumsum(indptr, out=indptr)
        return _freeze(indptr), _freeze(indices), _freeze(slots.reshape(-1, 9).astype(np.int64))

    def locate(self, pts) -> np.ndarray:
        """Element index containing each point (structured meshes only)."""
        if not hasattr(self, "_grid"):
            raise NotImplementedError("point location needs a structured mesh")
        n, dom = self._grid
        pts = np.asarray(pts, dtype=float)
        sx = (pts[:, 0] - dom.x0) / (dom.x1 - dom.x0) * n
        sy = (pts[:, 1] - dom.y0) / (dom.y1 - dom.y0) * n
        i = np.clip(np.floor(sx).astype(np.int64), 0, n - 1)
        j = np.clip(np.floor(sy).astype(np.int64), 0, n - 1)
        upper = (sy - j) > (sx - i)
        return 2 * (j * n + i) + upper.astype(np.int64)


def build_uniform_mesh(n: int, domain: Rectangle | None = None) -> Mesh:
    """Structured mesh with 2 n^2 triangles on `domain` (unit square by default)."""
    if int(n) != n or n < 1:
        raise ValueError(f"need at least one subdivision per side, got n={n}")
    n = int(n)
    dom = domain or Rectangle.unit()
    xs = np.linspace(dom.x0, dom.x1, n + 1)
    ys = np.linspace(dom.y0, dom.y1, n + 1)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(n), np.arange(n))
    i, j = i.ravel(), j.ravel()
    p00 = j * (n + 1) + i
    p10 = p00 + 1
    p01 = p00 + n + 1
    p11 = p01 + 1
    elements = np.empty((2 * n * n, 3), dtype=np.int64)
    elements[0::2] = np.column_stack([p00, p10, p11])
    elements[1::2] = np.column_stack([p00, p11, p01])

    gi, gj = np.meshgrid(np.arange(n + 1), np.arange(n + 1))
    on_bnd = (gi == 0) | (gi == n) | (gj == 0) | (gj == n)
    mesh = Mesh(nodes, elements, np.flatnonzero(on_bnd.ravel()), dom)
    mesh._grid = (n, dom)
    return mesh


def refine_uniform(mesh: Mesh) -> Mesh:
    """Red refinement: every triangle is split into four congruent children."""
    edges, el2edge = mesh.edges
    n0 = mesh.n_nodes
    mids = 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])
    nodes = np.vstack([mesh.nodes, mids])

    a, b, c = mesh.elements.T
    m_ab, m_bc, m_ca = (el2edge + n0).T
    children = np.stack([
        np.column_stack([a, m_ab, m_ca]),
        np.column_stack([m_ab, b, m_bc]),
        np.column_stack([m_ca, m_bc, c]),
        np.column_stack([m_ab, m_bc, m_ca]),
    ], axis=1).reshape(-1, 3)

    counts = np.bincount(el2edge.ravel(), minlength=len(edges))
    bnd_edges = np.flatnonzero(counts == 1)
    boundary = np.concatenate([mesh.boundary_nodes, bnd_edges + n0])
    return Mesh(nodes, children, boundary, mesh.domain)


class ControlRegion:
    """Elements of a mesh contained in the closed control rectangle."""

    def __init__(self, mesh: Mesh, omega: Rectangle, element_ids):
        self.mesh = mesh
        self.omega = omega
        self.element_ids = _freeze(np.asarray(element_ids, dtype=np.int64))

    def __repr__(self):
        return f"ControlRegion({self.omega.as_tuple()}, elements={self.size})"

    @property
    def size(self) -> int:
        return len(self.element_ids)

    @cached_property
    def areas(self) -> np.ndarray:
        return _freeze(self.mesh.element_areas[self.element_ids])

    @property
    def covered_measure(self) -> float:
        return float(self.areas.sum())

    @property
    def uncovered_measure(self) -> float:
        """|omega minus omega_h|."""
        return max(self.omega.area - self.covered_measure, 0.0)

    @cached_property
    def barycenters(self) -> np.ndarray:
        return _freeze(self.mesh.barycenters[self.element_ids])

    @cached_property
    def vertices(self) -> np.ndarray:
        return _freeze(self.mesh.vertices[self.element_ids])


def extract_control_region(mesh: Mesh, omega: Rectangle, tol: float = 1e-12) -> ControlRegion:
    if not omega.compactly_inside(mesh.domain):
        raise ValueError(f"control rectangle {omega.as_tuple()} is not compactly contained in the domain")
    inside = omega.contains_closed(mesh.vertices, tol).all(axis=1)
    inside &= omega.contains_closed(mesh.barycenters, tol)
    return ControlRegion(mesh, omega, np.flatnonzero(inside))
