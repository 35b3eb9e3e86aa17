import numpy as np
import pytest

from bangbang.analysis import monitor_second_derivative_bound
from bangbang.assembly import CUBIC, RULE_D7, ZERO, ControlField, composite
from bangbang.geometry import Rectangle
from bangbang.mesh import build_uniform_mesh
from bangbang.objective import (ReducedObjective, eval_gradient, eval_hessian_form, eval_objective,
                                tracking_by_quadrature)
from bangbang.pde import ProblemSpec, discretize, solve_state

OMEGA = Rectangle(0.25, 0.75, 0.25, 0.75)
zero = lambda x: np.zeros(len(x))
one = lambda x: np.ones(len(x))


def test_zero_source_unit_target(mesh16):
    spec = ProblemSpec(zero, one, OMEGA, 0.0, 1.0, nonlinearity=CUBIC)
    u = discretize(spec, mesh16).control(0.3)
    assert eval_objective(spec, mesh16, u, alpha_h=0.0) == pytest.approx(0.5, abs=1e-14)


def test_zero_source_gradient_is_tikhonov(mesh16, rng):
    spec = ProblemSpec(zero, one, OMEGA, 0.0, 1.0, nonlinearity=CUBIC)
    d = discretize(spec, mesh16)
    u = d.control(rng.random(d.region.size))
    g = eval_gradient(spec, mesh16, u)
    assert np.allclose(g.values, d.alpha_h * u.values, atol=1e-15)
    assert np.all(g.tracking_part == 0.0)


def test_attained_target_gives_zero(mesh16):
    source = lambda x: 10.0 * np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])
    base = ProblemSpec(source, zero, OMEGA, 0.0, 1.0, nonlinearity=CUBIC)
    y, _ = solve_state(base, discretize(base, mesh16).control(0.6), mesh16, tol=1e-14)
    spec = ProblemSpec(source, y.evaluate, OMEGA, 0.0, 1.0, nonlinearity=CUBIC)
    obj = ReducedObjective(spec, mesh16, alpha_h=0.0, newton_tol=1e-14)
    u = obj.problem.control(0.6)
    # expanded quadratic form: exact zero up to rounding of |y|^2
    assert abs(obj.value(u)) < 1e-14
    assert np.abs(obj.gradient(u).values).max() < 1e-12


def test_tracking_matches_independent_quadrature(cubic):
    obj = ReducedObjective(cubic.spec, build_uniform_mesh(32), alpha_h=0.0)
    ub = cubic.u_bar_field(obj.region)
    ev = obj.evaluate(ub)
    other = tracking_by_quadrature(cubic.spec, ev.state, composite(RULE_D7, 1))
    assert abs(ev.value - other) <= 1e-8 * abs(other)


def test_tikhonov_term(cubic, mesh16, rng):
    d = discretize(cubic.spec, mesh16)
    u = d.control(rng.random(d.region.size))
    j0 = eval_objective(cubic.spec, mesh16, u, alpha_h=0.0)
    j1 = eval_objective(cubic.spec, mesh16, u, alpha_h=0.3)
    assert j1 - j0 == pytest.approx(0.15 * u.inner(u), rel=1e-10)
    g = eval_gradient(cubic.spec, mesh16, u, alpha_h=0.3)
    g0 = eval_gradient(cubic.spec, mesh16, u, alpha_h=0.3, include_tikhonov=False)
    assert np.allclose(g.values - g0.values, 0.3 * u.values)


def test_gradient_central_differences(cubic, mesh16, rng):
    obj = ReducedObjective(cubic.spec, mesh16, newton_tol=1e-13)
    u = obj.problem.control(rng.uniform(0.1, 0.9, obj.region.size))
    v = obj.problem.control(rng.uniform(-1.0, 1.0, obj.region.size))
    t = 1e-5
    fd = (obj.value(u + t * v) - obj.value(u - t * v)) / (2 * t)
    assert abs(fd - obj.gradient(u).apply(v)) <= 1e-6 * abs(fd)


def test_difference_matches_values(cubic, mesh16, rng):
    obj = ReducedObjective(cubic.spec, mesh16, newton_tol=1e-14)
    u = obj.problem.control(rng.uniform(0.1, 0.9, obj.region.size))
    w = obj.problem.control(rng.uniform(0.1, 0.9, obj.region.size))
    assert obj.difference(u, w) == pytest.approx(obj.value(w) - obj.value(u), rel=1e-10)


@pytest.mark.parametrize("kind", ["linear", "cubic"])
def test_hessian_bilinear_symmetric_and_methods_agree(kind, linear, cubic, rng):
    prob = {"linear": linear, "cubic": cubic}[kind]
    mesh = build_uniform_mesh(12)
    obj = ReducedObjective(prob.spec, mesh)
    region = obj.region
    u = ControlField(region, rng.uniform(0.1, 0.9, region.size))
    v1, v2, v3 = (ControlField(region, rng.standard_normal(region.size)) for _ in range(3))
    h12, h21 = obj.hessian(u, v1, v2), obj.hessian(u, v2, v1)
    assert h12.method_a == pytest.approx(h21.method_a, rel=1e-12)
    assert h12.relative_gap <= 1e-10
    h_sum = obj.hessian(u, v1 + 2.0 * v3, v2).method_a
    assert h_sum == pytest.approx(h12.method_a + 2.0 * obj.hessian(u, v3, v2).method_a, rel=1e-10, abs=1e-14)


def test_hessian_without_nonlinearity_has_no_curvature_term(mesh16, rng):
    spec = ProblemSpec(one, zero, OMEGA, 0.0, 1.0, nonlinearity=ZERO)
    obj = ReducedObjective(spec, mesh16, alpha_h=0.0)
    u = obj.problem.control(0.5)
    v = obj.problem.control(rng.standard_normal(obj.region.size))
    H = eval_hessian_form(spec, mesh16, u, v, v, alpha_h=0.0)
    assert H.relative_gap < 1e-12


def test_hessian_directional_derivative_of_gradient(cubic, mesh16, rng):
    obj = ReducedObjective(cubic.spec, mesh16, newton_tol=1e-14)
    u = obj.problem.control(rng.uniform(0.2, 0.8, obj.region.size))
    v = obj.problem.control(rng.standard_normal(obj.region.size))
    w = obj.problem.control(rng.standard_normal(obj.region.size))
    t = 1e-6
    fd = (obj.gradient(u + t * v).apply(w) - obj.gradient(u - t * v).apply(w)) / (2 * t)
    assert fd == pytest.approx(obj.hessian(u, v, w).method_a, rel=1e-5)


def test_discrete_gradient_approaches_switching_function(cubic):
    errs = []
    for n in (8, 16, 32):
        obj = ReducedObjective(cubic.spec, build_uniform_mesh(n), alpha_h=0.0)
        ub = cubic.u_bar_field(obj.region)
        g = obj.gradient(ub, include_tikhonov=False)
        errs.append(np.abs(g.values - cubic.psi_bar(obj.region.barycenters)).max())
    assert errs[0] > errs[1] > errs[2]
    assert np.log2(errs[1] / errs[2]) >= 1.0


def test_second_derivative_bound_stays_bounded(cubic):
    vals = []
    for n in (8, 16, 32):
        mesh = build_uniform_mesh(n)
        obj = ReducedObjective(cubic.spec, mesh, alpha_h=0.0)
        vals.append(monitor_second_derivative_bound(cubic.spec, mesh, cubic.u_bar_field(obj.region), n_dirs=10))
    assert max(vals) <= 3.0 * vals[0]


def test_state_solves_are_cached(cubic, mesh16):
    obj = ReducedObjective(cubic.spec, mesh16)
    u = obj.problem.control(0.5)
    obj.value(u)
    obj.gradient(u)
    obj.value(u.with_values(u.values.copy()))
    assert obj.n_state_solves == 1
