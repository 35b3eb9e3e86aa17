"""Discrete state, adjoint and sensitivity equations of the bilinear control problem.

State:        a(y, z) + int [b(., y) + chi u y] z = int f z
Adjoint:      transpose of the state Jacobian applied to phi = M y - int y_d phi_i
Linearized:   J_y z_v = -int_{omega_h} v y phi_i
Second order: J_y w = -(int b''(., y) z1 z2 phi_i + int v1 z2 phi_i + int v2 z1 phi_i)

Homogeneous Dirichlet conditions are imposed by row/column elimination.
"""
from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .assembly import (
    ZERO, ControlField, Factorization, Nonlinearity, SolverError, StateField,
    apply_dirichlet, assemble_control_coupling, assemble_load, assemble_mass,
    assemble_semilinear, assemble_stiffness, coupling_times, ellipticity_constant, integrate,
    semilinear_increment,
)
from .geometry import Rectangle
from .mesh import ControlRegion, Mesh, extract_control_region

NEWTON_TOL = 1e-10
LINEAR_TOL = 1e-11


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Data of a bilinear elliptic control problem on a rectangle.

    `source` and `target` map points (P, 2) to values (P,).  `diffusion`
    returns (P, 2, 2) matrices and `reaction` returns (P,) values; None means
    the identity matrix and zero respectively.  The Tikhonov weight on a mesh
    of size h is ``c_tik * h``.  `interfaces` lists lines (nx, ny, c) across
    which source or target may jump; None treats every element as cut.
    """

    source: Callable
    target: Callable
    omega: Rectangle
    alpha: float
    beta: float
    nonlinearity: Nonlinearity = ZERO
    diffusion: Callable | None = None
    reaction: Callable | None = None
    c_tik: float = 1.0
    interfaces: tuple | None = None
    domain: Rectangle = field(default_factory=Rectangle.unit)
    name: str = "custom"

    def __post_init__(self):
        if not (0.0 <= self.alpha < self.beta < np.inf):
            raise ValueError(f"control bounds must satisfy 0 <= alpha < beta, got [{self.alpha}, {self.beta}]")
        if self.c_tik < 0.0:
            raise ValueError("Tikhonov coefficient must be nonnegative")
        if not self.omega.compactly_inside(self.domain):
            raise ValueError("control region must be compactly contained in the domain")

    def tikhonov(self, h: float) -> float:
        return self.c_tik * h


@dataclass
class SolveReport:
    iterations: int
    residual: float
    converged: bool
    wall_time: float
    history: list = field(default_factory=list)
    values: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"iterations": self.iterations, "residual": self.residual,
                "converged": self.converged, "wall_time": self.wall_time}


class ConvergenceError(SolverError):
    def __init__(self, msg, report: SolveReport):
        super().__init__(msg)
        self.report = report


class DiscreteProblem:
    """Assembled, control-independent parts of the discrete problem on one mesh."""

    def __init__(self, spec: ProblemSpec, mesh: Mesh):
        self.spec = spec
        self.mesh = mesh
        self.region: ControlRegion = extract_control_region(mesh, spec.omega)
        self.ellipticity = ellipticity_constant(mesh, spec.diffusion)
        self.K = assemble_stiffness(mesh, spec.diffusion, spec.reaction)
        self.M = assemble_mass(mesh)
        cuts = spec.interfaces
        self.load = assemble_load(mesh, spec.source, interfaces=cuts)
        self.target_load = assemble_load(mesh, spec.target, interfaces=cuts)
        self.target_sq = integrate(mesh, lambda x: np.asarray(spec.target(x)) ** 2, interfaces=cuts)
        self.alpha_h = spec.tikhonov(mesh.h)
        self.boundary = mesh.boundary_nodes
        self._interior = np.ones(mesh.n_nodes, dtype=bool)
        self._interior[self.boundary] = False
        self._factors = OrderedDict()

    # -- helpers ----------------------------------------------------------
    def control(self, values) -> ControlField:
        return ControlField(self.region, values)

    def check_control(self, u: ControlField):
        if u.region.mesh is not self.mesh:
            raise ValueError("control field belongs to a different mesh")

    def interior_norm(self, r) -> float:
        return float(np.linalg.norm(r[self._interior]))

    def residual(self, y: np.ndarray, u: ControlField) -> np.ndarray:
        yf = StateField(self.mesh, y)
        r = (self.K @ y + assemble_semilinear(yf, self.spec.nonlinearity, 0)
             + coupling_times(u.values, self.region, y) - self.load)
        r[self.boundary] = 0.0
        return r

    def jacobian(self, y: np.ndarray, u: ControlField) -> sp.csr_matrix:
        yf = StateField(self.mesh, y)
        return (self.K + assemble_semilinear(yf, self.spec.nonlinearity, 1)
                + assemble_control_coupling(u)).tocsr()

    def factor(self, y: np.ndarray, u: ControlField) -> Factorization:
        key = (hash(np.asarray(y).tobytes()), hash(u.values.tobytes()))
        fac = self._factors.get(key)
        if fac is None:
            A, _ = apply_dirichlet(self.jacobian(y, u), np.zeros(self.mesh.n_nodes), self.boundary)
            fac = Factorization(A, LINEAR_TOL)
            self._factors[key] = fac
            while len(self._factors) > 1:
                self._factors.popitem(last=False)
        return fac

    def _solve(self, y, u, rhs, transpose=False) -> np.ndarray:
        rhs = np.array(rhs, dtype=float)
        rhs[self.boundary] = 0.0
        return self.factor(y, u).solve(rhs, transpose=transpose)

    # -- the four equations -------------------------------------------------
    def state(self, u: ControlField, y0=None, tol: float = NEWTON_TOL, max_iter: int = 50):
        self.check_control(u)
        t0 = time.perf_counter()
        y = np.zeros(self.mesh.n_nodes) if y0 is None else np.array(y0, dtype=float)
        y[self.boundary] = 0.0
        threshold = tol * (1.0 + self.interior_norm(self.load))
        r = self.residual(y, u)
        rn = self.interior_norm(r)
        history = [rn]
        k = 0
        while rn > threshold and k < max_iter:
            fac = self.factor(y, u)
            dy = fac.solve(-r)
            step = 1.0
            for _ in range(11):
                y_try = y + step * dy
                r_try = self.residual(y_try, u)
                rn_try = self.interior_norm(r_try)
                if rn_try < rn:
                    break
                step *= 0.5
            y, r, rn = y_try, r_try, rn_try
            history.append(rn)
            k += 1
        report = SolveReport(k, rn, rn <= threshold, time.perf_counter() - t0, history)
        if not report.converged:
            raise ConvergenceError(
                f"Newton iteration did not converge in {max_iter} steps (residual {rn:.3e})", report)
        return StateField(self.mesh, y), report

    def state_increment(self, u: ControlField, y: StateField, w: ControlField, tol: float = 1e-13,
                        max_iter: int = 50) -> StateField:
        """d_h with y_h + d_h the state for control w, given the state y_h for u.

        Newton on A(y + d; w) - A(y; u) = 0, written so every term is
        proportional to d or to w - u; rounding errors then scale with the
        increment instead of with y_h.
        """
        self.check_control(w)
        nl = self.spec.nonlinearity
        forcing = coupling_times(w.values - u.values, self.region, y.values)
        forcing[self.boundary] = 0.0
        threshold = tol * self.interior_norm(forcing)
        d = np.zeros(self.mesh.n_nodes)

        def g(d):
            r = (self.K @ d + semilinear_increment(y, StateField(self.mesh, d), nl)
                 + coupling_times(w.values, self.region, d) + forcing)
            r[self.boundary] = 0.0
            return r

        r = g(d)
        rn = self.interior_norm(r)
        history = [rn]
        k = 0
        while rn > threshold and k < max_iter:
            d = d + self._solve(y.values + d, w, -r)
            r = g(d)
            rn = self.interior_norm(r)
            history.append(rn)
            k += 1
            if rn > 0.5 * history[-2]:
                break       # rounding floor reached
        if rn > max(threshold, 1e-8 * self.interior_norm(forcing)):
            report = SolveReport(k, rn, False, 0.0, history)
            raise ConvergenceError(
                f"increment Newton iteration did not converge in {max_iter} steps (residual {rn:.3e})", report)
        return StateField(self.mesh, d)

    def adjoint(self, u: ControlField, y: StateField) -> StateField:
        rhs = self.M @ y.values - self.target_load
        return StateField(self.mesh, self._solve(y.values, u, rhs, transpose=True))

    def linearized(self, u: ControlField, y: StateField, v: ControlField) -> StateField:
        rhs = -coupling_times(v.values, self.region, y.values)
        return StateField(self.mesh, self._solve(y.values, u, rhs))

    def second_sensitivity(self, u: ControlField, y: StateField, v1: ControlField, v2: ControlField,
                           z1: StateField | None = None, z2: StateField | None = None) -> StateField:
        z1 = z1 if z1 is not None else self.linearized(u, y, v1)
        z2 = z2 if z2 is not None else self.linearized(u, y, v2)
        forcing = (assemble_semilinear(y, self.spec.nonlinearity, 2, z1, z2)
                   + coupling_times(v1.values, self.region, z2.values)
                   + coupling_times(v2.values, self.region, z1.values))
        return StateField(self.mesh, self._solve(y.values, u, -forcing))

    # -- objective pieces ---------------------------------------------------
    def tracking(self, y: StateField) -> float:
        """0.5 ||y_h - y_d||^2, expanded so its y-gradient is M y - target_load."""
        v = y.values
        return 0.5 * float(v @ (self.M @ v)) - float(self.target_load @ v) + 0.5 * self.target_sq


@lru_cache(maxsize=4)
def discretize(spec: ProblemSpec, mesh: Mesh) -> DiscreteProblem:
    return DiscreteProblem(spec, mesh)


def _problem_for(spec: ProblemSpec, mesh: Mesh, u: ControlField) -> DiscreteProblem:
    if u.region.mesh is not mesh:
        raise ValueError("control field belongs to a different mesh")
    return discretize(spec, mesh)


def solve_state(spec: ProblemSpec, u: ControlField, mesh: Mesh | None = None, y0=None,
                tol: float = NEWTON_TOL, max_iter: int = 50):
    """Newton solve of the discrete state equation; returns (StateField, SolveReport)."""
    mesh = mesh or u.region.mesh
    return _problem_for(spec, mesh, u).state(u, y0=y0, tol=tol, max_iter=max_iter)


def solve_adjoint(spec: ProblemSpec, u: ControlField, y: StateField) -> StateField:
    return _problem_for(spec, y.mesh, u).adjoint(u, y)


def solve_linearized(spec: ProblemSpec, u: ControlField, y: StateField, v: ControlField) -> StateField:
    return _problem_for(spec, y.mesh, u).linearized(u, y, v)


def solve_second_sensitivity(spec: ProblemSpec, u: ControlField, y: StateField,
                             v1: ControlField, v2: ControlField) -> StateField:
    return _problem_for(spec, y.mesh, u).second_sensitivity(u, y, v1, v2)
