import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bangbang.assembly import CUBIC, ControlField
from bangbang.geometry import Rectangle
from bangbang.mesh import build_uniform_mesh, extract_control_region
from bangbang.optimizer import (ACTIVE_ALPHA, ACTIVE_BETA, UNDECIDED, OptimizerConfig, OptimizerWarning,
                                bang_bang_rounding, classify, project_box, solve_control_problem,
                                stationarity_residual)
from bangbang.pde import ProblemSpec

OMEGA = Rectangle(0.25, 0.75, 0.25, 0.75)


@pytest.fixture(scope="module")
def region8():
    return extract_control_region(build_uniform_mesh(8), OMEGA)


def test_project_box_examples(region8):
    u = ControlField(region8, np.linspace(-1.0, 2.0, region8.size))
    p = project_box(u, 0.0, 1.0)
    assert p.values.min() == 0.0 and p.values.max() == 1.0
    inside = (u.values >= 0.0) & (u.values <= 1.0)
    assert np.array_equal(p.values[inside], u.values[inside])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=8, max_size=8), st.floats(-1, 1), st.floats(0.01, 2))
def test_project_box_idempotent(vals, a, width, ):
    region = extract_control_region(build_uniform_mesh(4), OMEGA)
    u = ControlField(region, np.asarray(vals))
    b = a + width
    once = project_box(u, a, b)
    assert np.array_equal(project_box(once, a, b).values, once.values)
    assert np.all((once.values >= a) & (once.values <= b))


def test_config_validation():
    for bad in ({"tol": 0.0}, {"armijo_slope": 1.0}, {"backtrack": 1.5}, {"max_iter": 0}):
        with pytest.raises(ValueError):
            OptimizerConfig(**bad)


def test_stationarity_residual_and_classification():
    areas = np.array([1.0, 1.0, 1.0, 1.0])
    u = np.array([0.0, 1.0, 0.5, 0.0])
    psi = np.array([2.0, -3.0, 0.0, -1.0])
    assert stationarity_residual(u, psi, areas, 0.0, 1.0) == pytest.approx(1.0)
    assert list(classify(u, psi, 0.0, 1.0)) == [ACTIVE_ALPHA, ACTIVE_BETA, UNDECIDED, UNDECIDED]


def test_zero_source_drives_control_to_lower_bound():
    spec = ProblemSpec(lambda x: np.zeros(len(x)), lambda x: np.ones(len(x)), OMEGA, 0.2, 1.0,
                       nonlinearity=CUBIC)
    u, cert, rep = solve_control_problem(spec, build_uniform_mesh(16))
    assert rep.converged
    assert np.allclose(u.values, 0.2)
    assert cert.counts["active_alpha"] == u.region.size


@pytest.fixture(scope="module")
def manufactured_run(cubic):
    mesh = build_uniform_mesh(32)
    seen = []
    u, cert, rep = solve_control_problem(cubic.spec, mesh,
                                         callback=lambda k, u, J, rho: seen.append(u.values.copy()))
    return mesh, u, cert, rep, seen


def test_feasible_monotone_descent(manufactured_run, cubic):
    _, _, cert, rep, seen = manufactured_run
    assert rep.converged and cert.residual <= 1e-10
    assert len(seen) == rep.iterations + 1
    for vals in seen:
        assert vals.min() >= cubic.alpha and vals.max() <= cubic.beta
    J = np.array(rep.values)
    assert np.all(np.diff(J) <= 1e-15 * np.abs(J[:-1]))


def test_sign_rule_outside_tikhonov_band(manufactured_run, cubic):
    mesh, u, _, _, _ = manufactured_run
    psi = cubic.psi_bar(u.region.barycenters)
    alpha_h = mesh.h
    # interior values need -alpha_h < psi_h < 0; 0.01 covers |psi_h - psi| on this mesh
    lower = psi >= 0.01
    upper = psi <= -alpha_h - 0.01
    assert lower.any() and upper.any()
    assert np.all(u.values[lower] == cubic.alpha)
    assert np.all(u.values[upper] == cubic.beta)


def test_undecided_fraction_matches_band_measure(manufactured_run):
    mesh, u, cert, _, _ = manufactured_run
    # {x1 > 1/2 : |psi| < alpha_h} has measure alpha_h * int_{1/4}^{3/4} dx2 / sin^2(pi x2) = 2 alpha_h / pi
    predicted = 2.0 * mesh.h / np.pi / u.region.covered_measure
    undecided = 1.0 - cert.bang_bang_fraction
    assert abs(undecided - predicted) <= 0.25 * predicted


def test_complementarity(manufactured_run, cubic):
    _, u, cert, _, _ = manufactured_run
    psi = cert.gradient.values
    areas = u.region.areas
    gap = np.minimum(u.values - cubic.alpha, cubic.beta - u.values)
    interior = gap > 1e-3
    assert np.all(np.abs(psi[interior]) * areas[interior] * gap[interior] <= cert.residual + 1e-15)
    assert np.all(psi[cert.classification == ACTIVE_ALPHA] >= 0.0)
    assert np.all(psi[cert.classification == ACTIVE_BETA] <= 0.0)


def test_independent_of_initial_control(manufactured_run, cubic):
    mesh, u, _, _, _ = manufactured_run
    for init in (cubic.alpha, cubic.beta):
        other, _, rep = solve_control_problem(cubic.spec, mesh, OptimizerConfig(initial_control=init))
        assert rep.converged
        assert np.abs(other.values - u.values).max() < 1e-5


def test_tikhonov_band_shrinks_under_refinement(cubic):
    fractions = []
    for n in (16, 32, 64):
        _, cert, _ = solve_control_problem(cubic.spec, build_uniform_mesh(n))
        fractions.append(1.0 - cert.bang_bang_fraction)
    assert fractions[0] >= fractions[1] >= fractions[2]


def test_iteration_cap_warns(cubic):
    with pytest.warns(OptimizerWarning):
        _, cert, rep = solve_control_problem(cubic.spec, build_uniform_mesh(16), OptimizerConfig(max_iter=1))
    assert not rep.converged and not cert.converged


def test_without_barzilai_borwein_still_converges(cubic):
    _, _, rep = solve_control_problem(cubic.spec, build_uniform_mesh(8),
                                      OptimizerConfig(barzilai_borwein=False, max_iter=5000))
    assert rep.converged


def test_bang_bang_rounding(region8):
    u = ControlField(region8, 0.5)
    psi = ControlField(region8, np.linspace(-1.0, 1.0, region8.size))
    rounded, unchanged = bang_bang_rounding(u, psi, 0.5, 0.0, 1.0)
    p = psi.values
    assert np.all(rounded.values[p > 0.5] == 0.0)
    assert np.all(rounded.values[p < -0.5] == 1.0)
    assert np.all(rounded.values[np.abs(p) <= 0.5] == 0.5)
    assert unchanged == int(np.sum(np.abs(p) <= 0.5))
    _, none_left = bang_bang_rounding(u, psi, 1e-9, 0.0, 1.0)
    assert none_left == 0
