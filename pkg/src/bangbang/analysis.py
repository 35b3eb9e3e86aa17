"""Numerical checks of the structural, growth and second-order conditions and the error studies."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq
from scipy.stats import qmc

from .assembly import RULE_D7, ControlField, StateField
from .geometry import Rectangle
from .mesh import Mesh, build_uniform_mesh, extract_control_region
from .objective import GradientDensity, ReducedObjective
from .optimizer import OptimizerConfig, solve_control_problem
from .pde import ProblemSpec, discretize
from .problems import ManufacturedProblem, build_manufactured, exact_control_error

DEFAULT_EPS_FRACTIONS = 2.0 ** -np.arange(8, 2, -1)      # 2^-8 ... 2^-3
TAU_FRACTIONS = (0.05, 0.1, 0.2)


# --------------------------------------------------------------------------
# structure constant

@dataclass
class StructureEstimate:
    eps: np.ndarray
    measure: np.ndarray
    K: float
    kappa: float
    alpha: float
    beta: float
    method: str
    psi_max: float
    stderr: np.ndarray | None = None
    degenerate: bool = False        # psi vanishes on a set of positive measure

    @property
    def ratios(self) -> np.ndarray:
        return self.measure / self.eps

    @property
    def finite(self) -> bool:
        return math.isfinite(self.K)


def kappa_from_K(K: float, alpha: float, beta: float) -> float:
    """Growth constant 1 / (4 (beta - alpha) K); zero when K is infinite."""
    if not math.isfinite(K):
        return 0.0
    return 1.0 / (4.0 * (beta - alpha) * K)


def _slice_measure(g: Callable, a: float, b: float, levels: np.ndarray, n_grid: int = 2049) -> np.ndarray:
    """|{t in (a, b) : g(t) <= level}| for each level, by bracketing every crossing."""
    ts = np.linspace(a, b, n_grid)
    gs = g(ts)
    out = np.empty(len(levels))
    for k, lev in enumerate(levels):
        d = gs - lev
        # crossings inside grid cells plus level hits exactly on grid nodes
        pts = [a, b] + list(ts[d == 0.0])
        for i in np.flatnonzero(np.sign(d[:-1]) * np.sign(d[1:]) < 0):
            pts.append(brentq(lambda t: g(np.array([t]))[0] - lev, ts[i], ts[i + 1], xtol=1e-16, rtol=1e-15))
        pts = np.unique(pts)
        mids = 0.5 * (pts[:-1] + pts[1:])
        below = g(mids) <= lev
        out[k] = float(np.sum(np.diff(pts)[below]))
    return out


def _gauss_panels(a: float, b: float, panels: int = 16, order: int = 16):
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def _abs_on_line(psi: Callable, x2: float):
    return lambda t: np.abs(psi(np.column_stack([t, np.full(len(t), x2)])))


def estimate_structure_constant(psi, omega: Rectangle | None = None, eps_grid=None, alpha: float = 0.0,
                                beta: float = 1.0, method: str = "slicing", n_points: int = 2 ** 20,
                                seed: int = 0, psi_max: float | None = None) -> StructureEstimate:
    """K = max over the eps grid of |{|psi| <= eps}| / eps and kappa = 1/(4 (beta - alpha) K).

    `psi` is either a callable on points of omega or a ControlField (measure is
    then the exact area of elements with |psi_T| <= eps).  Methods for callables:
    'slicing' integrates the exact 1D sublevel measure along x1-lines with
    Gauss-Legendre in x2; 'montecarlo' counts a scrambled Sobol sample.
    """
    if isinstance(psi, (ControlField, GradientDensity)):
        field_ = psi.field if isinstance(psi, GradientDensity) else psi
        vals = np.abs(field_.values)
        areas = field_.region.areas
        pmax = float(vals.max()) if psi_max is None else psi_max
        eps = _eps(eps_grid, pmax)
        measure = np.array([areas[vals <= e].sum() for e in eps])
        zero_measure = float(areas[vals <= 1e-14 * max(pmax, 1e-300)].sum())
        return _finish(eps, measure, alpha, beta, "elementwise", pmax, None,
                       zero_measure > 1e-3 * areas.sum() or pmax == 0.0)

    if omega is None:
        raise ValueError("a callable switching function needs the region omega")
    if method == "montecarlo":
        sampler = qmc.Sobol(d=2, scramble=True, seed=seed)
        u = sampler.random(n_points)
        pts = np.column_stack([omega.x0 + (omega.x1 - omega.x0) * u[:, 0],
                               omega.y0 + (omega.y1 - omega.y0) * u[:, 1]])
        vals = np.abs(np.asarray(psi(pts), dtype=float))
        pmax = float(vals.max()) if psi_max is None else psi_max
        eps = _eps(eps_grid, pmax)
        frac = np.array([np.mean(vals <= e) for e in eps])
        measure = omega.area * frac
        stderr = omega.area * np.sqrt(frac * (1.0 - frac) / n_points)
        zero_frac = float(np.mean(vals <= 1e-14 * max(pmax, 1e-300)))
        return _finish(eps, measure, alpha, beta, "montecarlo", pmax, stderr,
                       zero_frac > 1e-3 or pmax == 0.0)
    if method == "slicing":
        nodes, weights = _gauss_panels(omega.y0, omega.y1)
        if psi_max is None:
            grid = np.linspace(0.0, 1.0, 513)
            X, Y = np.meshgrid(omega.x0 + (omega.x1 - omega.x0) * grid, omega.y0 + (omega.y1 - omega.y0) * grid)
            psi_max = float(np.abs(psi(np.column_stack([X.ravel(), Y.ravel()]))).max())
        eps = _eps(eps_grid, psi_max)
        levels = np.concatenate([[1e-14 * max(psi_max, 1e-300)], eps])
        slices = np.array([_slice_measure(_abs_on_line(psi, x2), omega.x0, omega.x1, levels) for x2 in nodes])
        m = weights @ slices
        return _finish(eps, m[1:], alpha, beta, "slicing", psi_max, None,
                       m[0] > 1e-3 * omega.area or psi_max == 0.0)
    raise ValueError(f"unknown method {method!r}")


def _eps(eps_grid, psi_max):
    if eps_grid is None:
        return DEFAULT_EPS_FRACTIONS * psi_max
    eps = np.asarray(eps_grid, dtype=float)
    if np.any(eps <= 0.0) or np.any(np.diff(eps) <= 0.0):
        raise ValueError("eps grid must be positive and increasing")
    return eps


def _finish(eps, measure, alpha, beta, method, psi_max, stderr, degenerate):
    measure = np.maximum.accumulate(np.asarray(measure, dtype=float))
    K = math.inf if degenerate else float(np.max(measure / eps))
    return StructureEstimate(np.asarray(eps), measure, K, kappa_from_K(K, alpha, beta), alpha, beta,
                             method, float(psi_max), stderr, degenerate)


# --------------------------------------------------------------------------
# first-order growth

@dataclass
class GrowthReport:
    n_samples: int
    violations: int
    worst_margin: float
    slack_constant: float
    h: float
    kappa: float
    witness: np.ndarray | None
    rows: list = field(default_factory=list)     # (family, l1_distance, lhs, rhs, slack, margin)

    @property
    def holds(self) -> bool:
        return self.violations == 0


def _growth_candidates(rng, u_bar: np.ndarray, x1: np.ndarray, alpha: float, beta: float, switch: float):
    """Random admissible controls: uniform noise, switch-band rewrites and single-element flips."""
    kind = rng.integers(3)
    if kind == 0:
        return "uniform", rng.uniform(alpha, beta, len(u_bar))
    if kind == 1:
        width = rng.uniform(0.0, 0.25) ** 2 * 4.0
        band = np.abs(x1 - switch) < width
        u = u_bar.copy()
        u[band] = rng.uniform(alpha, beta, band.sum()) if rng.random() < 0.5 else alpha + beta - u_bar[band]
        return "band", u
    u = u_bar.copy()
    e = rng.integers(len(u))
    u[e] = alpha + beta - u[e]
    return "flip", u


def check_first_order_growth(spec: ProblemSpec, mesh: Mesh, u_bar: ControlField, kappa: float,
                             n_samples: int = 500, seed: int = 0, psi_exact: Callable | None = None,
                             switch: float = 0.5) -> GrowthReport:
    """Sample J'(u_bar)(u - u_bar) >= kappa ||u - u_bar||_1^2 - C h ||u - u_bar||_1.

    The derivative uses the discrete density psi_h at u_bar without Tikhonov;
    C = max_T |psi_h - Pi_h psi| / h accounts for replacing psi by psi_h.
    """
    from .assembly import project_Pi_h
    obj = ReducedObjective(spec, mesh, alpha_h=0.0)
    grad = obj.gradient(u_bar, include_tikhonov=False)
    region = u_bar.region
    areas = region.areas
    if psi_exact is not None:
        psi_ref = project_Pi_h(psi_exact, region, interfaces=spec.interfaces).values
        C = float(np.max(np.abs(grad.values - psi_ref))) / mesh.h
    else:
        C = 0.0
    rng = np.random.default_rng(seed)
    x1 = region.barycenters[:, 0]
    rows, worst, witness, violations = [], math.inf, None, 0
    for _ in range(n_samples):
        family, u = _growth_candidates(rng, u_bar.values, x1, spec.alpha, spec.beta, switch)
        d = u - u_bar.values
        dist = float(areas @ np.abs(d))
        lhs = float(areas @ (grad.values * d))
        rhs = kappa * dist ** 2
        slack = C * mesh.h * dist
        margin = lhs - rhs + slack
        rows.append((family, dist, lhs, rhs, slack, margin))
        if margin < worst:
            worst = margin
        if margin < 0.0:
            violations += 1
            if witness is None:
                witness = u
    return GrowthReport(n_samples, violations, worst, C, mesh.h, kappa, witness, rows)


# --------------------------------------------------------------------------
# critical cone and second-order condition

@dataclass
class CriticalConeSample:
    tau: float
    directions: list
    support: np.ndarray
    empty: bool
    seed: int

    def validate(self, u_bar: ControlField, alpha: float, beta: float, atol: float = 1e-12) -> bool:
        at_a = np.abs(u_bar.values - alpha) <= atol
        at_b = np.abs(u_bar.values - beta) <= atol
        for v in self.directions:
            x = v.values
            if np.any(x[~self.support] != 0.0) or np.any(x[at_a] < 0.0) or np.any(x[at_b] > 0.0):
                return False
        return True


def sample_critical_cone(u_bar: ControlField, psi, tau: float, n_dirs: int = 200, seed: int = 0,
                         alpha: float = 0.0, beta: float = 1.0, atol: float = 1e-12) -> CriticalConeSample:
    """Random directions v with v = 0 where |psi_T| > tau, v >= 0 where u = alpha, v <= 0 where u = beta.

    Each direction has a random support fraction inside the admissible band and
    is normalized to ||v||_L1 = 1.
    """
    if not tau > 0.0:
        raise ValueError("tau must be positive")
    p = psi.values
    support = np.abs(p) <= tau
    if not support.any():
        return CriticalConeSample(tau, [], support, True, seed)
    region = u_bar.region
    at_a = np.abs(u_bar.values - alpha) <= atol
    at_b = np.abs(u_bar.values - beta) <= atol
    rng = np.random.default_rng(seed)
    idx = np.flatnonzero(support)
    dirs = []
    while len(dirs) < n_dirs:
        keep = rng.random(len(idx)) < rng.uniform(0.05, 1.0)
        if not keep.any():
            continue
        v = np.zeros(region.size)
        mag = rng.random(keep.sum())
        sign = rng.choice([-1.0, 1.0], keep.sum())
        sel = idx[keep]
        sign[at_a[sel]] = 1.0
        sign[at_b[sel]] = -1.0
        v[sel] = mag * sign
        norm = float(region.areas @ np.abs(v))
        if norm == 0.0:
            continue
        dirs.append(ControlField(region, v / norm))
    return CriticalConeSample(tau, dirs, support, False, seed)


@dataclass
class SOCReport:
    """Sampled (necessary, non-exhaustive) check of J''(u)v^2 >= -kappa' ||v||_1^2 with kappa' < 2 kappa."""

    tau: float
    n_directions: int
    min_rayleigh: float
    kappa: float
    kappa_prime: float
    verified: bool
    rayleigh: np.ndarray
    method_gap: float
    empty_cone: bool = False
    note: str = "sampled necessary check; not a certificate over the whole cone"


def check_second_order_condition(spec: ProblemSpec, mesh: Mesh, u_bar: ControlField,
                                 sample: CriticalConeSample, kappa: float) -> SOCReport:
    if sample.empty:
        return SOCReport(sample.tau, 0, math.inf, kappa, 0.0, True, np.array([]), 0.0, True)
    obj = ReducedObjective(spec, mesh, alpha_h=0.0)
    areas = u_bar.region.areas
    ray, gap = [], 0.0
    for v in sample.directions:
        H = obj.hessian(u_bar, v, v)
        ray.append(H.method_a / float(areas @ np.abs(v.values)) ** 2)
        gap = max(gap, H.relative_gap)
    ray = np.array(ray)
    m = float(ray.min())
    kp = max(0.0, -m)
    return SOCReport(sample.tau, len(ray), m, kappa, kp, kp < 2.0 * kappa, ray, gap)


def soc_tau_sensitivity(spec: ProblemSpec, mesh: Mesh, u_bar: ControlField, psi, kappa: float,
                        psi_max: float, fractions=TAU_FRACTIONS, n_dirs: int = 200, seed: int = 0):
    out = []
    for frac in fractions:
        sample = sample_critical_cone(u_bar, psi, frac * psi_max, n_dirs, seed, spec.alpha, spec.beta)
        out.append(check_second_order_condition(spec, mesh, u_bar, sample, kappa))
    return out


def monitor_second_derivative_bound(spec: ProblemSpec, mesh: Mesh, u: ControlField, n_dirs: int = 20,
                                    seed: int = 0, q: float = 6.0 / 5.0) -> float:
    """max |J''(u)(v1, v2)| / (||v1||_q ||v2||_q) over random (partly localized) directions."""
    obj = ReducedObjective(spec, mesh, alpha_h=0.0)
    rng = np.random.default_rng(seed)
    region = u.region
    worst = 0.0
    for _ in range(n_dirs):
        vs = []
        for _ in range(2):
            v = rng.uniform(-1.0, 1.0, region.size)
            if rng.random() < 0.5:
                v[rng.random(region.size) > 0.1] = 0.0
            vs.append(ControlField(region, v))
        form = obj.hessian(u, vs[0], vs[1]).method_a
        worst = max(worst, abs(form) / (vs[0].lp_norm(q) * vs[1].lp_norm(q)))
    return worst


# --------------------------------------------------------------------------
# no-growth demonstration

@dataclass
class NoGrowthTable:
    delta: float
    rho: float
    rows: list          # (k, l1_distance, dJ)

    @property
    def l1_spread(self) -> float:
        d = np.array([r[1] for r in self.rows])
        return float(d.max() - d.min())

    @property
    def decay_ratio(self) -> float:
        """|dJ| at the largest k over |dJ| at the smallest k."""
        return abs(self.rows[-1][2]) / abs(self.rows[0][2])

    def monotone(self, rtol: float = 1e-6) -> bool:
        """|dJ| non-increasing in k; `rtol` absorbs ties between mirror-image stripe patterns."""
        a = np.abs([r[2] for r in self.rows])
        return bool(np.all(a[1:] <= a[:-1] * (1.0 + rtol)))


def stripe_direction(region, B: Rectangle, k: int) -> np.ndarray:
    """sign(sin(k pi x1)) at element barycenters inside B, 0 elsewhere (ties to +1)."""
    inside = B.contains_closed(region.vertices, 1e-12).all(axis=1)
    s = np.where(np.sin(k * np.pi * region.barycenters[:, 0]) >= 0.0, 1.0, -1.0)
    return np.where(inside, s, 0.0)


def no_growth_demo(spec: ProblemSpec, mesh: Mesh, u_bar: ControlField, B: Rectangle, delta: float,
                   k_list=(2, 4, 8, 16, 32), rho: float | None = None) -> NoGrowthTable:
    """J(u_k) - J(u_bar) for u_k = u_bar + (delta/|B|) v_k with stripe patterns v_k on B.

    J is the unregularized objective on `mesh`, which should resolve the
    finest stripes (n a multiple of 2 max(k)).
    """
    region = u_bar.region
    inside = B.contains_closed(region.vertices, 1e-12).all(axis=1)
    if not inside.any():
        raise ValueError("subregion B contains no control elements")
    vals = u_bar.values[inside]
    margin = float(min(vals.min() - spec.alpha, spec.beta - vals.max()))
    rho = margin if rho is None else rho
    if rho <= 0.0 or margin < rho - 1e-14:
        raise ValueError(f"control is not interior on B with margin rho = {rho}")
    if delta > rho * B.area * (1.0 + 1e-12):
        raise ValueError(f"delta = {delta} exceeds rho |B| = {rho * B.area}; u_k would leave the box")
    obj = ReducedObjective(spec, mesh, alpha_h=0.0)
    J0 = obj.value(u_bar)
    rows = []
    for k in k_list:
        v = stripe_direction(region, B, k)
        uk = u_bar.with_values(u_bar.values + delta / B.area * v)
        dist = float(region.areas @ np.abs(uk.values - u_bar.values))
        rows.append((int(k), dist, obj.value(uk) - J0))
    return NoGrowthTable(delta, rho, rows)


# --------------------------------------------------------------------------
# finite element error study at the manufactured control

def _linf_error(field: StateField, exact: Callable) -> float:
    m = field.mesh
    pts = RULE_D7.points(m.vertices).reshape(-1, 2)
    e_q = np.abs(field.at_rule(RULE_D7).ravel() - exact(pts)).max()
    e_n = np.abs(field.values - exact(m.nodes)).max()
    return float(max(e_q, e_n))


def _l2_error(field: StateField, exact: Callable) -> float:
    m = field.mesh
    pts = RULE_D7.points(m.vertices).reshape(-1, 2)
    d = (field.at_rule(RULE_D7).ravel() - exact(pts)).reshape(m.n_elements, -1)
    return float(np.sqrt(m.element_areas @ (d ** 2 @ RULE_D7.weights)))


@dataclass
class FemErrorTable:
    rows: list          # (n, h, l2_state, l2_adjoint, linf_state, linf_adjoint)

    def rates(self, col: int) -> np.ndarray:
        r = np.array(self.rows)
        return np.log(r[:-1, col] / r[1:, col]) / np.log(r[:-1, 1] / r[1:, 1])

    @property
    def linf_constant(self) -> float:
        """max over levels of (||y - y_h||_inf + ||phi - phi_h||_inf) / h."""
        return max((r[4] + r[5]) / r[1] for r in self.rows)


def fem_error_row(problem: ManufacturedProblem, n: int):
    mesh = build_uniform_mesh(n)
    obj = ReducedObjective(problem.spec, mesh, alpha_h=0.0)
    u = problem.u_bar_field(obj.region)
    y = obj.evaluate(u).state
    phi = obj.adjoint(u)
    return (n, mesh.h, _l2_error(y, problem.y_bar), _l2_error(phi, problem.phi_bar),
            _linf_error(y, problem.y_bar), _linf_error(phi, problem.phi_bar))


def fem_error_study(problem: ManufacturedProblem, levels=(8, 16, 32, 64, 128)) -> FemErrorTable:
    return FemErrorTable([fem_error_row(problem, n) for n in levels])


# --------------------------------------------------------------------------
# abstract error bound

@dataclass
class BoundComponents:
    error_sq: float
    gradient_gap: float
    term1: float
    projection_error: float
    derivative_term: float
    term2: float
    proxy_error: float
    slack: float
    gamma: float

    @property
    def total(self) -> float:
        return self.term1 + self.term2

    @property
    def satisfied(self) -> bool:
        return self.error_sq <= self.total + self.slack


def prolong_control(u_h: ControlField, fine_region, fill: Callable) -> tuple[ControlField, np.ndarray]:
    """Extend u_h to the control elements of a nested finer mesh; elements outside omega_h get `fill`.

    Returns the fine control and the index of the coarse control element (-1 outside omega_h).
    """
    coarse = u_h.region
    owner = coarse.mesh.locate(fine_region.barycenters)
    lookup = np.full(coarse.mesh.n_elements, -1, dtype=np.int64)
    lookup[coarse.element_ids] = np.arange(coarse.size)
    parent = lookup[owner]
    vals = np.asarray(fill(fine_region.barycenters), dtype=float).copy()
    vals[parent >= 0] = u_h.values[parent[parent >= 0]]
    return ControlField(fine_region, vals), parent


def evaluate_abstract_bound(problem: ManufacturedProblem, mesh_h: Mesh, mesh_ref: Mesh, u_h: ControlField,
                            kappa: float, kappa_prime: float, linf_constant: float,
                            alpha_h: float | None = None) -> BoundComponents:
    """Both sides of the abstract estimate with the continuous derivative replaced by a finer mesh.

    error^2 <= (g+1)/g^2 ||psi_h(u_h) - psi(u_h ext)||_inf^2
               + (1/g) (||Pi_h u - u||_1^2 + 2 J'(u_h ext)(Pi_h u - u)),   g = (kappa - kappa')/2

    The finer-mesh density differs from the continuous one by at most
    s = 2 C h_ref (C the measured L-infinity constant of the state/adjoint
    errors); `slack` is the resulting worst-case change of the right side.
    """
    if not kappa_prime < kappa:
        raise ValueError(f"need kappa' < kappa, got kappa' = {kappa_prime}, kappa = {kappa}")
    gamma = 0.5 * (kappa - kappa_prime)
    spec = problem.spec
    coarse = ReducedObjective(spec, mesh_h, alpha_h)
    psi_h = coarse.gradient(u_h).values

    ref = ReducedObjective(spec, mesh_ref, alpha_h=0.0)
    fine_region = ref.region
    u_ext, parent = prolong_control(u_h, fine_region, problem.u_bar)
    psi_ref = ref.gradient(u_ext, include_tikhonov=False).values
    mask = parent >= 0
    gap = float(np.max(np.abs(psi_h[parent[mask]] - psi_ref[mask])))
    term1 = (gamma + 1.0) / gamma ** 2 * gap ** 2

    proj = problem.u_bar_field(u_h.region)
    proj_err = exact_control_error(problem, proj)
    ubar_fine = problem.u_bar_field(fine_region).values
    diff_fine = np.where(mask, proj.values[np.maximum(parent, 0)], ubar_fine) - ubar_fine
    deriv = float(fine_region.areas @ (psi_ref * diff_fine))
    term2 = (proj_err ** 2 + 2.0 * deriv) / gamma

    s = 2.0 * linf_constant * mesh_ref.h
    slack = ((gamma + 1.0) / gamma ** 2 * ((gap + s) ** 2 - gap ** 2)
             + 2.0 / gamma * s * float(fine_region.areas @ np.abs(diff_fine)))
    err = exact_control_error(problem, u_h)
    return BoundComponents(err ** 2, gap, term1, proj_err, deriv, term2, s, slack, gamma)


# --------------------------------------------------------------------------
# convergence study

@dataclass
class ConvergenceRow:
    n: int
    h: float
    alpha_h: float
    l1_error: float
    eoc: float
    iterations: int
    residual: float
    bang_bang_fraction: float
    bound: BoundComponents | None = None


@dataclass
class ConvergenceTable:
    rows: list
    c_tik: float
    kappa: float | None = None
    kappa_prime: float | None = None
    linf_constant: float | None = None

    @property
    def fitted_constant(self) -> float:
        r = self.rows[0]
        return r.l1_error / (r.h + r.alpha_h)

    def envelope_ratios(self) -> np.ndarray:
        C = self.fitted_constant
        return np.array([r.l1_error / (C * (r.h + r.alpha_h)) for r in self.rows])

    @property
    def final_eoc(self) -> float:
        return self.rows[-1].eoc

    @property
    def bound_satisfied(self) -> bool:
        return all(r.bound is not None and r.bound.satisfied for r in self.rows)


def _level(params: dict, n: int, c_tik: float, opt: dict, bound: dict | None):
    problem = build_manufactured(**params, c_tik=c_tik)
    mesh = build_uniform_mesh(n)
    cfg = OptimizerConfig(**opt)
    u, cert, rep = solve_control_problem(problem.spec, mesh, cfg)
    if not rep.converged:
        raise RuntimeError(f"optimizer did not converge on n={n}: residual {rep.residual:.3e} "
                           f"after {rep.iterations} iterations")
    err = exact_control_error(problem, u)
    alpha_h = discretize(problem.spec, mesh).alpha_h if cfg.alpha_h is None else cfg.alpha_h
    comps = None
    if bound is not None:
        ref = build_uniform_mesh(bound["ref_factor"] * n)
        comps = evaluate_abstract_bound(problem, mesh, ref, u, bound["kappa"], bound["kappa_prime"],
                                        bound["linf_constant"], cfg.alpha_h)
    return ConvergenceRow(n, mesh.h, alpha_h, err, math.nan, rep.iterations, rep.residual,
                          cert.bang_bang_fraction, comps)


def convergence_study(problem: ManufacturedProblem, levels=(8, 16, 32, 64, 128), c_tik: float = 1.0,
                      optimizer: dict | None = None, bound: bool = True, kappa: float | None = None,
                      kappa_prime: float | None = None, linf_constant: float | None = None,
                      ref_factor: int = 4, jobs: int = 1) -> ConvergenceTable:
    """Solve the discrete problems with alpha_h = c_tik h and tabulate L1 errors and the abstract bound.

    Levels are independent and may run in `jobs` worker processes; rows come
    back in level order either way.
    """
    levels = list(levels)
    if len(levels) < 2:
        raise ValueError("need at least two mesh levels")
    params = problem_params(problem)
    opt = dict(optimizer or {})
    bound_args = None
    if bound:
        if kappa is None or kappa_prime is None or linf_constant is None:
            raise ValueError("the bound needs kappa, kappa' and the L-infinity constant")
        bound_args = {"ref_factor": ref_factor, "kappa": kappa, "kappa_prime": kappa_prime,
                      "linf_constant": linf_constant}
    args = [(params, n, c_tik, opt, bound_args) for n in levels]
    rows = []
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                for row in ex.map(_level, *zip(*args)):
                    rows.append(row)
        else:
            for a in args:
                rows.append(_level(*a))
    except Exception as exc:
        _fill_eoc(rows)
        raise IncompleteStudyError(ConvergenceTable(rows, c_tik, kappa, kappa_prime, linf_constant),
                                   levels[len(rows)], exc) from exc
    _fill_eoc(rows)
    return ConvergenceTable(rows, c_tik, kappa, kappa_prime, linf_constant)


def _fill_eoc(rows):
    for prev, row in zip(rows[:-1], rows[1:]):
        row.eoc = math.log(prev.l1_error / row.l1_error) / math.log(prev.h / row.h)


class IncompleteStudyError(RuntimeError):
    def __init__(self, partial: ConvergenceTable, level: int, cause: Exception):
        super().__init__(f"convergence study failed on level n={level}: {cause}")
        self.partial = partial
        self.level = level


def problem_params(problem: ManufacturedProblem) -> dict:
    return {"kind": problem.kind, "c": problem.c, "bounds": (problem.alpha, problem.beta)}
