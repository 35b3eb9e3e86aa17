"""Projected gradient solver for the discrete box-constrained control problem."""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np

from .assembly import ControlField
from .mesh import Mesh
from .objective import GradientDensity, ReducedObjective
from .pde import ProblemSpec, SolveReport

ACTIVE_ALPHA, UNDECIDED, ACTIVE_BETA = -1, 0, 1


@dataclass
class OptimizerConfig:
    max_iter: int = 2000
    tol: float = 1e-10
    armijo_slope: float = 1e-4
    backtrack: float = 0.5
    initial_step: float = 1.0
    max_backtracks: int = 40
    alpha_h: float | None = None        # None: c_tik * h from the problem
    initial_control: float | np.ndarray | None = None   # None: midpoint of the bounds
    barzilai_borwein: bool = True

    def __post_init__(self):
        if not self.tol > 0.0:
            raise ValueError("stationarity tolerance must be positive")
        if not 0.0 < self.armijo_slope < 1.0:
            raise ValueError("Armijo slope fraction must lie in (0, 1)")
        if not 0.0 < self.backtrack < 1.0:
            raise ValueError("backtracking factor must lie in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("need at least one iteration")


class OptimizerWarning(RuntimeWarning):
    pass


@dataclass
class StationarityCertificate:
    residual: float
    tolerance: float
    converged: bool
    classification: np.ndarray
    gradient: GradientDensity

    @property
    def counts(self) -> dict:
        c = self.classification
        return {"active_alpha": int(np.sum(c == ACTIVE_ALPHA)),
                "active_beta": int(np.sum(c == ACTIVE_BETA)),
                "undecided": int(np.sum(c == UNDECIDED))}

    @property
    def bang_bang_fraction(self) -> float:
        return 1.0 - self.counts["undecided"] / max(len(self.classification), 1)


def project_box(u: ControlField, alpha: float, beta: float) -> ControlField:
    return u.with_values(np.clip(u.values, alpha, beta))


def stationarity_residual(u: np.ndarray, psi: np.ndarray, areas: np.ndarray, alpha: float, beta: float) -> float:
    """sum_T |T| |min_{w in [alpha, beta]} psi_T (w - u_T)|, zero exactly at discrete VI points."""
    viol = np.maximum(psi, 0.0) * (u - alpha) + np.maximum(-psi, 0.0) * (beta - u)
    return float(areas @ viol)


def classify(u: np.ndarray, psi: np.ndarray, alpha: float, beta: float, atol: float = 1e-12) -> np.ndarray:
    cls = np.full(u.shape, UNDECIDED, dtype=np.int8)
    cls[(np.abs(u - alpha) <= atol) & (psi >= 0.0)] = ACTIVE_ALPHA
    cls[(np.abs(u - beta) <= atol) & (psi <= 0.0)] = ACTIVE_BETA
    return cls


def solve_control_problem(spec: ProblemSpec, mesh: Mesh, config: OptimizerConfig | None = None,
                          objective: ReducedObjective | None = None, callback=None):
    """Projected gradient with Armijo backtracking; returns (control, certificate, report).

    Trial steps after the first iteration use the Barzilai-Borwein length
    (L2(omega_h) inner products), always safeguarded by the Armijo test.
    `report.history` holds the stationarity residuals and `report.values` the
    objective values of the accepted iterates; `callback(k, u, J, rho)` sees
    every accepted iterate.
    """
    cfg = config or OptimizerConfig()
    t0 = time.perf_counter()
    obj = objective or ReducedObjective(spec, mesh, cfg.alpha_h)
    region = obj.region
    areas = region.areas
    a, b = spec.alpha, spec.beta

    init = 0.5 * (a + b) if cfg.initial_control is None else cfg.initial_control
    u = project_box(ControlField(region, init), a, b)
    J = obj.value(u)
    grad = obj.gradient(u)
    rho = stationarity_residual(u.values, grad.values, areas, a, b)
    history, values = [rho], [J]
    if callback is not None:
        callback(0, u, J, rho)
    step = cfg.initial_step
    k = 0
    stalled = False
    while rho > cfg.tol and k < cfg.max_iter:
        s = step
        for _ in range(cfg.max_backtracks):
            trial = project_box(u.with_values(u.values - s * grad.values), a, b)
            d = trial.values - u.values
            slope = float(areas @ (grad.values * d))
            if obj.difference(u, trial) <= cfg.armijo_slope * slope:
                break
            s *= cfg.backtrack
        else:
            stalled = True
            break
        J_trial = obj.value(trial)
        new_grad = obj.gradient(trial)
        if cfg.barzilai_borwein:
            dg = new_grad.values - grad.values
            curv = float(areas @ (d * dg))
            step = float(areas @ (d * d)) / curv if curv > 0.0 else s / cfg.backtrack
            step = min(max(step, 1e-12), 1e12)
        else:
            step = cfg.initial_step
        u, J, grad = trial, J_trial, new_grad
        rho = stationarity_residual(u.values, grad.values, areas, a, b)
        history.append(rho)
        values.append(J)
        k += 1
        if callback is not None:
            callback(k, u, J, rho)

    converged = rho <= cfg.tol
    report = SolveReport(k, rho, converged, time.perf_counter() - t0, history, values)
    cert = StationarityCertificate(rho, cfg.tol, converged, classify(u.values, grad.values, a, b), grad)
    if not converged:
        why = "line search stalled" if stalled else f"iteration cap {cfg.max_iter} reached"
        warnings.warn(f"projected gradient not converged ({why}); residual {rho:.3e} > {cfg.tol:.1e}",
                      OptimizerWarning, stacklevel=2)
    return u, cert, report


def bang_bang_rounding(u: ControlField, psi: GradientDensity | ControlField, tau: float,
                       alpha: float, beta: float):
    """Snap elements with |psi_T| > tau to the bound selected by the sign of psi_T.

    Returns the rounded control and the number of elements left unchanged.
    """
    p = psi.values
    out = u.values.copy()
    out[p > tau] = alpha
    out[p < -tau] = beta
    unchanged = int(np.sum(np.abs(p) <= tau))
    return u.with_values(out), unchanged
