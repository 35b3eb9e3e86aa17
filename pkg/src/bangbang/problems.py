"""Manufactured bilinear control problems with known bang-bang stationary controls.

On the unit square with control region (1/4, 3/4)^2 we prescribe

    y(x)   = sin(pi x1) sin(pi x2)
    phi(x) = c y(x) (x1 - 1/2)
    psi(x) = -phi(x) y(x) = -c sin^2(pi x1) sin^2(pi x2) (x1 - 1/2)
    u(x)   = alpha where psi > 0, beta where psi < 0

and pick f and y_d so that y is the state for u and phi its adjoint:

    f   = -Lap y + b(y) + chi u y
    y_d = y - (-Lap phi + b'(y) phi + chi u phi)

Then u satisfies the first-order condition by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assembly import CUBIC, ZERO, ControlField, Nonlinearity
from .geometry import Rectangle, split_area
from .pde import ProblemSpec

PI = np.pi
UNIT_OMEGA = Rectangle(0.25, 0.75, 0.25, 0.75)
KINDS = {"linear": ZERO, "cubic": CUBIC}


def _xy(x):
    x = np.asarray(x, dtype=float)
    return x[..., 0], x[..., 1]


def smooth_state(x):
    x1, x2 = _xy(x)
    return np.sin(PI * x1) * np.sin(PI * x2)


def neg_laplacian_state(x):
    return 2.0 * PI ** 2 * smooth_state(x)


@dataclass(frozen=True, eq=False)
class ManufacturedProblem:
    kind: str
    c: float
    alpha: float
    beta: float
    c_tik: float = 1.0
    omega: Rectangle = UNIT_OMEGA
    switch: float = 0.5
    nonlinearity: Nonlinearity = field(init=False)
    spec: ProblemSpec = field(init=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown manufactured kind {self.kind!r}; choose from {sorted(KINDS)}")
        if self.c == 0.0:
            raise ValueError("amplitude c = 0 makes the switching function vanish identically")
        object.__setattr__(self, "nonlinearity", KINDS[self.kind])
        spec = ProblemSpec(source=self.source, target=self.target, omega=self.omega,
                           alpha=self.alpha, beta=self.beta, nonlinearity=self.nonlinearity,
                           c_tik=self.c_tik, interfaces=self.interfaces,
                           name=f"manufactured-{self.kind}")
        object.__setattr__(self, "spec", spec)

    @property
    def interfaces(self) -> tuple:
        """Lines carrying the jumps of f and y_d: the switch and the sides of omega."""
        o = self.omega
        return ((1.0, 0.0, self.switch), (1.0, 0.0, o.x0), (1.0, 0.0, o.x1),
                (0.0, 1.0, o.y0), (0.0, 1.0, o.y1))

    # closed forms ---------------------------------------------------------
    def y_bar(self, x):
        return smooth_state(x)

    def phi_bar(self, x):
        x1, _ = _xy(x)
        return self.c * smooth_state(x) * (x1 - self.switch)

    def psi_bar(self, x):
        return -self.phi_bar(x) * self.y_bar(x)

    def neg_laplacian_phi(self, x):
        x1, x2 = _xy(x)
        s = smooth_state(x)
        return self.c * (2.0 * PI ** 2 * s * (x1 - self.switch)
                         - 2.0 * PI * np.cos(PI * x1) * np.sin(PI * x2))

    def in_omega(self, x):
        return self.omega.contains_closed(x, 0.0)

    def u_bar(self, x):
        """Bang-bang control on omega (zero outside)."""
        x1, _ = _xy(x)
        hi, lo = (self.beta, self.alpha) if self.c > 0 else (self.alpha, self.beta)
        u = np.where(x1 > self.switch, hi, lo)
        return np.where(self.in_omega(x), u, 0.0)

    def source(self, x):
        y = self.y_bar(x)
        return neg_laplacian_state(x) + self.nonlinearity.b(x, y) + self.u_bar(x) * y

    def target(self, x):
        x1, x2 = _xy(x)
        s1, s2 = np.sin(PI * x1), np.sin(PI * x2)
        y = s1 * s2
        shift = x1 - self.switch
        phi = self.c * y * shift
        neg_lap_phi = self.c * (2.0 * PI ** 2 * y * shift - 2.0 * PI * np.cos(PI * x1) * s2)
        return y - (neg_lap_phi + self.nonlinearity.db(x, y) * phi + self.u_bar(x) * phi)

    def psi_max(self) -> float:
        """max |psi| over omega, located by a bounded scalar search along x2 = 1/2."""
        from scipy.optimize import minimize_scalar
        g = lambda t: -abs(self.psi_bar(np.array([t, 0.5])))
        best = max((minimize_scalar(g, bounds=b, method="bounded", options={"xatol": 1e-13})
                    for b in ((self.omega.x0, self.switch), (self.switch, self.omega.x1))),
                   key=lambda r: -r.fun)
        return float(-best.fun)

    def u_bar_field(self, region) -> ControlField:
        """Pi_h of the bang-bang control."""
        from .assembly import project_Pi_h
        return project_Pi_h(self.u_bar, region, interfaces=self.interfaces)


def build_manufactured(kind: str = "cubic", c: float = 1.0, bounds=(0.0, 1.0), c_tik: float = 1.0):
    alpha, beta = bounds
    return ManufacturedProblem(kind, float(c), float(alpha), float(beta), float(c_tik))


@dataclass(frozen=True, eq=False)
class ReachableProblem:
    """Target reachable by an interior constant control u0, so J(u0) = 0."""

    kind: str
    alpha: float
    beta: float
    omega: Rectangle = UNIT_OMEGA
    spec: ProblemSpec = field(init=False)

    def __post_init__(self):
        nl = KINDS[self.kind]
        u0 = self.control_value

        def source(x):
            y = smooth_state(x)
            return neg_laplacian_state(x) + nl.b(x, y) + u0 * self.omega.contains_closed(x, 0.0) * y

        o = self.omega
        cuts = ((1.0, 0.0, o.x0), (1.0, 0.0, o.x1), (0.0, 1.0, o.y0), (0.0, 1.0, o.y1))
        spec = ProblemSpec(source=source, target=smooth_state, omega=self.omega, alpha=self.alpha,
                           beta=self.beta, nonlinearity=nl, c_tik=0.0, interfaces=cuts,
                           name=f"reachable-{self.kind}")
        object.__setattr__(self, "spec", spec)

    @property
    def control_value(self) -> float:
        return 0.5 * (self.alpha + self.beta)

    @property
    def margin(self) -> float:
        """Distance of the control value to the bounds."""
        return 0.5 * (self.beta - self.alpha)


def build_reachable(kind: str = "cubic", bounds=(0.0, 1.0)) -> ReachableProblem:
    return ReachableProblem(kind, float(bounds[0]), float(bounds[1]))


def exact_control_error(problem: ManufacturedProblem, u_h: ControlField) -> float:
    """||u_bar - u_h||_{L1(omega_h)} with exact splitting of elements cut by the switching line."""
    region = u_h.region
    verts = region.vertices
    x = verts[..., 0]
    hi, lo = (problem.beta, problem.alpha) if problem.c > 0 else (problem.alpha, problem.beta)
    cut = (x.min(axis=1) < problem.switch) & (x.max(axis=1) > problem.switch)
    right = x.mean(axis=1) > problem.switch
    ref = np.where(right, hi, lo)
    err = region.areas * np.abs(ref - u_h.values)
    for e in np.flatnonzero(cut):
        left_area, right_area = split_area(verts[e], (1.0, 0.0), problem.switch)
        err[e] = left_area * abs(lo - u_h.values[e]) + right_area * abs(hi - u_h.values[e])
    return float(err.sum())
