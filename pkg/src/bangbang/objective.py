"""Reduced discrete objective, its gradient density and the second-derivative form.

J_h(u) = 1/2 ||y_h(u) - y_d||^2 + alpha_h/2 ||u||^2_{L2(omega_h)}
psi_h  = -mean_T(phi_h y_h) + alpha_h u_T                    (per control element)

The second derivative is available in two independent forms:

  A: int z1 z2 + int (y_h - y_d) w_{12} + alpha_h int v1 v2
  B: int (1 - phi_h b''(y_h)) z1 z2 - int_omega phi_h (v1 z2 + v2 z1) + alpha_h int v1 v2

A uses the assembled mass matrix and the second sensitivity w; B evaluates the
integrands pointwise with the 3-point rule and needs no second sensitivity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembly import RULE_Q3, ControlField, StateField, element_product_means
from .mesh import Mesh
from .pde import NEWTON_TOL, DiscreteProblem, ProblemSpec, SolveReport, discretize


@dataclass
class GradientDensity:
    """psi_h per control element; `field` includes alpha_h u when `includes_tikhonov`."""

    field: ControlField
    includes_tikhonov: bool
    alpha_h: float
    tracking_part: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return self.field.values

    def apply(self, v: ControlField) -> float:
        """J_h'(u) v = sum_T psi_T v_T |T|."""
        return self.field.inner(v)


@dataclass
class HessianForms:
    method_a: float
    method_b: float

    @property
    def relative_gap(self) -> float:
        scale = max(abs(self.method_a), abs(self.method_b), 1e-300)
        return abs(self.method_a - self.method_b) / scale


@dataclass
class Evaluation:
    u: ControlField
    state: StateField
    report: SolveReport
    value: float
    _adjoint: StateField | None = None


class ReducedObjective:
    """J_h on one mesh with fixed alpha_h; keeps the two most recent states (base point and trial)."""

    def __init__(self, spec: ProblemSpec, mesh: Mesh, alpha_h: float | None = None,
                 newton_tol: float = NEWTON_TOL):
        self.newton_tol = newton_tol
        self.problem: DiscreteProblem = discretize(spec, mesh)
        self.spec = spec
        self.mesh = mesh
        self.region = self.problem.region
        self.alpha_h = self.problem.alpha_h if alpha_h is None else float(alpha_h)
        self.n_state_solves = 0
        self._recent: list[Evaluation] = []

    def _remember(self, ev: Evaluation) -> Evaluation:
        self._recent = [e for e in self._recent if not np.array_equal(e.u.values, ev.u.values)][-1:] + [ev]
        return ev

    def evaluate(self, u: ControlField) -> Evaluation:
        for ev in self._recent:
            if np.array_equal(ev.u.values, u.values):
                return ev
        y0 = self._recent[-1].state.values if self._recent else None
        y, report = self.problem.state(u, y0=y0, tol=self.newton_tol)
        self.n_state_solves += 1
        value = self.problem.tracking(y) + 0.5 * self.alpha_h * u.inner(u)
        return self._remember(Evaluation(u, y, report, value))

    def value(self, u: ControlField) -> float:
        return self.evaluate(u).value

    def difference(self, u: ControlField, w: ControlField) -> float:
        """J_h(w) - J_h(u) computed from the state increment, free of cancellation in J_h itself.

        The state for w obtained this way is kept for later calls when its
        full residual meets the Newton tolerance.
        """
        prob = self.problem
        ev = self.evaluate(u)
        y = ev.state
        dy = prob.state_increment(u, y, w).values
        track = float(dy @ (prob.M @ y.values - prob.target_load)) + 0.5 * float(dy @ (prob.M @ dy))
        du = w.with_values(w.values - u.values)
        delta = track + 0.5 * self.alpha_h * du.inner(w.with_values(w.values + u.values))
        y_new = y.values + dy
        rn = prob.interior_norm(prob.residual(y_new, w))
        if rn <= self.newton_tol * (1.0 + prob.interior_norm(prob.load)):
            state = StateField(self.mesh, y_new)
            value = prob.tracking(state) + 0.5 * self.alpha_h * w.inner(w)
            self._remember(Evaluation(w, state, SolveReport(0, rn, True, 0.0, [rn]), value))
        return delta

    def adjoint(self, u: ControlField) -> StateField:
        ev = self.evaluate(u)
        if ev._adjoint is None:
            ev._adjoint = self.problem.adjoint(u, ev.state)
        return ev._adjoint

    def gradient(self, u: ControlField, include_tikhonov: bool = True) -> GradientDensity:
        ev = self.evaluate(u)
        phi = self.adjoint(u)
        tracking = -element_product_means(self.region, phi.values, ev.state.values)
        psi = tracking + self.alpha_h * u.values if include_tikhonov else tracking
        return GradientDensity(u.with_values(psi), include_tikhonov, self.alpha_h, tracking)

    def hessian(self, u: ControlField, v1: ControlField, v2: ControlField) -> HessianForms:
        prob = self.problem
        ev = self.evaluate(u)
        y = ev.state
        phi = self.adjoint(u)
        z1 = prob.linearized(u, y, v1)
        z2 = z1 if v2 is v1 else prob.linearized(u, y, v2)
        tik = self.alpha_h * v1.inner(v2)

        w = prob.second_sensitivity(u, y, v1, v2, z1, z2)
        a = float(z1.values @ (prob.M @ z2.values)) + float((prob.M @ y.values - prob.target_load) @ w.values) + tik

        b = _adjoint_form(prob, y, phi, z1, z2, v1, v2) + tik
        return HessianForms(a, b)


def _adjoint_form(prob: DiscreteProblem, y, phi, z1, z2, v1, v2) -> float:
    mesh = prob.mesh
    rule = RULE_Q3
    pts = rule.points(mesh.vertices).reshape(-1, 2)
    shape = (mesh.n_elements, rule.size)
    yq, pq = y.at_rule(rule), phi.at_rule(rule)
    z1q, z2q = z1.at_rule(rule), z2.at_rule(rule)
    d2b = np.asarray(prob.spec.nonlinearity.d2b(pts, yq.ravel()), dtype=float).reshape(shape)
    wq = mesh.element_areas[:, None] * rule.weights[None, :]
    smooth = float(np.sum(wq * (1.0 - pq * d2b) * z1q * z2q))

    ids = prob.region.element_ids
    cross = pq[ids] * (v1.values[:, None] * z2q[ids] + v2.values[:, None] * z1q[ids])
    return smooth - float(np.sum(wq[ids] * cross))


def eval_objective(spec: ProblemSpec, mesh: Mesh, u: ControlField, alpha_h: float | None = None) -> float:
    return ReducedObjective(spec, mesh, alpha_h).value(u)


def eval_gradient(spec: ProblemSpec, mesh: Mesh, u: ControlField, alpha_h: float | None = None,
                  include_tikhonov: bool = True) -> GradientDensity:
    return ReducedObjective(spec, mesh, alpha_h).gradient(u, include_tikhonov)


def eval_hessian_form(spec: ProblemSpec, mesh: Mesh, u: ControlField, v1: ControlField, v2: ControlField,
                      alpha_h: float | None = None) -> HessianForms:
    return ReducedObjective(spec, mesh, alpha_h).hessian(u, v1, v2)


def tracking_by_quadrature(spec: ProblemSpec, y: StateField, rule) -> float:
    """1/2 ||y_h - y_d||^2 evaluated pointwise with `rule`, for cross-checks."""
    mesh = y.mesh
    pts = rule.points(mesh.vertices)
    yd = np.asarray(spec.target(pts.reshape(-1, 2)), dtype=float).reshape(pts.shape[:2])
    diff = y.at_rule(rule) - yd
    return 0.5 * float(mesh.element_areas @ (diff ** 2 @ rule.weights))
