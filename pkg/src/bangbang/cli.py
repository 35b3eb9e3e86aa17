"""Command-line driver: ``bangbang {solve,converge,analyze} CONFIG [--output DIR] [--jobs N]``.

Configuration is an INI file with the sections [problem], [mesh], [optimizer],
[analysis] and [output]; every key is optional and unknown keys are errors.
The output directory can also be set through the BANGBANG_OUTPUT_DIR
environment variable (the --output flag wins over both).

Exit codes: 0 success, 1 solver failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import math
import os
import sys
import traceback
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .assembly import NONLINEARITIES, SolverError
from .geometry import Rectangle
from .mesh import build_uniform_mesh
from .objective import ReducedObjective
from .optimizer import OptimizerConfig, OptimizerWarning, solve_control_problem
from .pde import ProblemSpec

OUTPUT_ENV = "BANGBANG_OUTPUT_DIR"
EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str):
    return None if text.strip() in ("", "none", "midpoint") else float(text)


# section -> key -> (parser, default text)
SCHEMA = {
    "problem": {
        "type": (str, "manufactured"),          # manufactured | reachable | custom
        "kind": (str, "cubic"),                 # linear | cubic (manufactured, reachable)
        "c": (float, "1.0"),
        "alpha": (float, "0.0"),
        "beta": (float, "1.0"),
        "source": (str, "0"),                   # custom: expressions in x1, x2
        "target": (str, "0"),
        "nonlinearity": (str, "zero"),
        "omega": (_floats, "0.25, 0.75, 0.25, 0.75"),
    },
    "mesh": {
        "n": (int, "32"),
        "levels": (_ints, "8, 16, 32, 64, 128"),
        "ref_factor": (int, "4"),
    },
    "optimizer": {
        "c_tik": (float, "1.0"),
        "max_iter": (int, "2000"),
        "tol": (float, "1e-10"),
        "armijo_slope": (float, "1e-4"),
        "backtrack": (float, "0.5"),
        "initial_control": (_opt_float, "midpoint"),
    },
    "analysis": {
        "structure": (_bool, "true"),
        "growth": (_bool, "true"),
        "soc": (_bool, "true"),
        "no_growth": (_bool, "true"),
        "bound": (_bool, "true"),
        "seed": (int, "0"),
        "mc_points": (int, "1048576"),
        "growth_samples": (int, "500"),
        "n_dirs": (int, "200"),
        "tau_fractions": (_floats, "0.05, 0.1, 0.2"),
        "check_n": (int, "64"),
        "no_growth_n": (int, "128"),
        "k_list": (_ints, "2, 4, 8, 16, 32"),
    },
    "output": {
        "directory": (str, "out"),
    },
}


@dataclass
class RunConfig:
    values: dict
    text: str

    def __getitem__(self, key):
        return self.values[key]

    def resolved_ini(self) -> str:
        lines = []
        for sec, keys in SCHEMA.items():
            lines.append(f"[{sec}]")
            for k in keys:
                lines.append(f"{k} = {self.values[sec]['_raw'][k]}")
            lines.append("")
        return "\n".join(lines)


def load_config(path) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        text = Path(path).read_text()
        parser.read_string(text, source=str(path))
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key in parser[sec]:
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key '{key}' in section [{sec}]")
    values = {}
    for sec, keys in SCHEMA.items():
        values[sec] = {"_raw": {}}
        for key, (conv, default) in keys.items():
            raw = parser.get(sec, key, fallback=default)
            try:
                values[sec][key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"[{sec}] {key} = {raw!r}: {exc}") from exc
            values[sec]["_raw"][key] = raw
    _validate(values)
    return RunConfig(values, text)


def _validate(v):
    p = v["problem"]
    if p["type"] not in ("manufactured", "reachable", "custom"):
        raise ConfigError(f"[problem] type must be manufactured, reachable or custom, got {p['type']!r}")
    if p["kind"] not in ("linear", "cubic"):
        raise ConfigError(f"[problem] kind must be linear or cubic, got {p['kind']!r}")
    if p["nonlinearity"] not in NONLINEARITIES:
        raise ConfigError(f"[problem] nonlinearity must be one of {sorted(NONLINEARITIES)}")
    if len(p["omega"]) != 4:
        raise ConfigError("[problem] omega needs four numbers x0, x1, y0, y1")
    if not 0.0 <= p["alpha"] < p["beta"]:
        raise ConfigError("[problem] bounds must satisfy 0 <= alpha < beta")
    if p["type"] == "manufactured" and p["c"] == 0.0:
        raise ConfigError("[problem] c must be nonzero")
    m = v["mesh"]
    if m["n"] < 1 or any(n < 1 for n in m["levels"]) or m["ref_factor"] < 1:
        raise ConfigError("[mesh] sizes must be positive")
    if v["optimizer"]["c_tik"] < 0.0:
        raise ConfigError("[optimizer] c_tik must be nonnegative")
    try:
        _optimizer_config(v)
    except ValueError as exc:
        raise ConfigError(f"[optimizer] {exc}") from exc


def _optimizer_config(v) -> OptimizerConfig:
    o = v["optimizer"]
    return OptimizerConfig(max_iter=o["max_iter"], tol=o["tol"], armijo_slope=o["armijo_slope"],
                           backtrack=o["backtrack"], initial_control=o["initial_control"])


def _optimizer_dict(v) -> dict:
    o = v["optimizer"]
    return {"max_iter": o["max_iter"], "tol": o["tol"], "armijo_slope": o["armijo_slope"],
            "backtrack": o["backtrack"], "initial_control": o["initial_control"]}


_EXPR_NAMES = {name: getattr(np, name) for name in
               ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "where", "minimum", "maximum", "pi")}


def _expression(expr: str, what: str):
    try:
        code = compile(expr, f"<{what}>", "eval")
    except SyntaxError as exc:
        raise ConfigError(f"[problem] {what}: {exc}") from exc

    def f(x):
        ns = dict(_EXPR_NAMES, x1=x[:, 0], x2=x[:, 1])
        return np.broadcast_to(np.asarray(eval(code, {"__builtins__": {}}, ns), dtype=float), (len(x),))
    try:
        f(np.array([[0.5, 0.5]]))
    except Exception as exc:
        raise ConfigError(f"[problem] {what} = {expr!r} cannot be evaluated: {exc}") from exc
    return f


def build_problem(cfg: RunConfig):
    """(ProblemSpec, manufactured problem or None, reachable problem or None)."""
    from .problems import build_manufactured, build_reachable
    p = cfg["problem"]
    c_tik = cfg["optimizer"]["c_tik"]
    if p["type"] == "manufactured":
        prob = build_manufactured(p["kind"], p["c"], (p["alpha"], p["beta"]), c_tik)
        return prob.spec, prob, None
    if p["type"] == "reachable":
        prob = build_reachable(p["kind"], (p["alpha"], p["beta"]))
        return prob.spec, None, prob
    try:
        omega = Rectangle(*p["omega"])
        spec = ProblemSpec(source=_expression(p["source"], "source"), target=_expression(p["target"], "target"),
                           omega=omega, alpha=p["alpha"], beta=p["beta"],
                           nonlinearity=NONLINEARITIES[p["nonlinearity"]], c_tik=c_tik, name="custom")
    except ValueError as exc:
        raise ConfigError(f"[problem] {exc}") from exc
    return spec, None, None


# --------------------------------------------------------------------------
# output

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % float(x)
    return str(x)


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def write_keyvalue(path: Path, items):
    with open(path, "w") as fh:
        for k, v in items:
            fh.write(f"{k} = {_fmt(v)}\n")


def prepare_output(cfg: RunConfig, override: str | None) -> Path:
    out = Path(override or os.environ.get(OUTPUT_ENV) or cfg["output"]["directory"])
    out.mkdir(parents=True, exist_ok=True)
    for stale in ("INCOMPLETE", "failure.txt"):
        (out / stale).unlink(missing_ok=True)
    (out / "config.ini").write_text(cfg.text)
    (out / "config_resolved.ini").write_text(cfg.resolved_ini())
    (out / "VERSION").write_text(f"bangbang {__version__}\nkernels {kernels.BACKEND}\n")
    return out


def _fail(out: Path, exc: BaseException, marker: bool = False) -> int:
    (out / "failure.txt").write_text("".join(traceback.format_exception(type(exc), exc, exc.__traceback__)))
    if marker:
        (out / "INCOMPLETE").write_text(f"{exc}\n")
    print(f"error: {exc}", file=sys.stderr)
    return EXIT_SOLVER


# --------------------------------------------------------------------------
# commands

def cmd_solve(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    spec, _, _ = build_problem(cfg)
    mesh = build_uniform_mesh(cfg["mesh"]["n"])
    opt = _optimizer_config(cfg.values)
    obj = ReducedObjective(spec, mesh, opt.alpha_h)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OptimizerWarning)
        u, cert, rep = solve_control_problem(spec, mesh, opt, obj)
    ev = obj.evaluate(u)
    phi = obj.adjoint(u)
    region = u.region
    bc = region.barycenters
    write_csv(out / "control.csv", ["element", "x1", "x2", "value"],
              zip(region.element_ids, bc[:, 0], bc[:, 1], u.values))
    nodes = mesh.nodes
    for name, f in (("state", ev.state), ("adjoint", phi)):
        write_csv(out / f"{name}.csv", ["node", "x1", "x2", "value"],
                  zip(range(mesh.n_nodes), nodes[:, 0], nodes[:, 1], f.values))
    counts = cert.counts
    write_keyvalue(out / "report.txt", [
        ("problem", spec.name), ("n", cfg["mesh"]["n"]), ("h", mesh.h), ("alpha_h", obj.alpha_h),
        ("objective", ev.value), ("iterations", rep.iterations), ("residual", rep.residual),
        ("tolerance", cert.tolerance), ("converged", rep.converged), ("wall_time", rep.wall_time),
        ("state_newton_iterations", ev.report.iterations), ("state_residual", ev.report.residual),
        ("active_alpha", counts["active_alpha"]), ("active_beta", counts["active_beta"]),
        ("undecided", counts["undecided"]), ("bang_bang_fraction", cert.bang_bang_fraction),
        ("ellipticity", obj.problem.ellipticity), ("uncovered_measure", region.uncovered_measure),
    ])
    if not rep.converged:
        return _fail(out, SolverError(f"projected gradient did not converge: residual {rep.residual:.3e} "
                                      f"after {rep.iterations} iterations"))
    return EXIT_OK


def _structure(prob, a, seed=0, mc_points=None):
    from .analysis import estimate_structure_constant
    pmax = prob.psi_max()
    sl = estimate_structure_constant(prob.psi_bar, prob.omega, alpha=prob.alpha, beta=prob.beta,
                                     method="slicing", psi_max=pmax)
    mc = None
    if mc_points:
        mc = estimate_structure_constant(prob.psi_bar, prob.omega, alpha=prob.alpha, beta=prob.beta,
                                         method="montecarlo", psi_max=pmax, n_points=mc_points, seed=seed)
    return sl, mc


def _check_setup(prob, n):
    mesh = build_uniform_mesh(n)
    obj = ReducedObjective(prob.spec, mesh, alpha_h=0.0)
    ub = prob.u_bar_field(obj.region)
    psi = obj.gradient(ub, include_tikhonov=False)
    return mesh, ub, psi


def _soc_reports(prob, a, kappa):
    from .analysis import soc_tau_sensitivity
    mesh, ub, psi = _check_setup(prob, a["check_n"])
    return soc_tau_sensitivity(prob.spec, mesh, ub, psi, kappa, prob.psi_max(), a["tau_fractions"],
                               a["n_dirs"], a["seed"])


def cmd_converge(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    from .analysis import IncompleteStudyError, convergence_study, fem_error_study
    _, prob, _ = build_problem(cfg)
    if prob is None:
        raise ConfigError("converge needs [problem] type = manufactured (the exact control must be known)")
    levels = cfg["mesh"]["levels"]
    if len(levels) < 4:
        raise ConfigError("converge needs at least four mesh levels")
    a = cfg["analysis"]
    do_bound = a["bound"]
    kappa = kappa_prime = linf = None
    if do_bound:
        sl, _ = _structure(prob, a)
        kappa = sl.kappa
        kappa_prime = max(r.kappa_prime for r in _soc_reports(prob, a, kappa))
        fem = fem_error_study(prob, levels)
        linf = fem.linf_constant
        write_csv(out / "fem_errors.csv",
                  ["n", "h", "l2_state", "l2_adjoint", "linf_state", "linf_adjoint"], fem.rows)
    try:
        table = convergence_study(prob, levels, cfg["optimizer"]["c_tik"], _optimizer_dict(cfg.values),
                                  do_bound, kappa, kappa_prime, linf, cfg["mesh"]["ref_factor"], jobs)
        status = EXIT_OK
        failure = None
    except IncompleteStudyError as exc:
        table, status, failure = exc.partial, EXIT_SOLVER, exc
    _write_convergence(out, table)
    if failure is not None:
        return _fail(out, failure, marker=True)
    write_keyvalue(out / "report.txt", [
        ("problem", prob.spec.name), ("c_tik", table.c_tik), ("levels", len(table.rows)),
        ("final_eoc", table.final_eoc), ("fitted_constant", table.fitted_constant),
        ("max_envelope_ratio", float(np.max(table.envelope_ratios()))),
        ("kappa", kappa if kappa is not None else math.nan),
        ("kappa_prime", kappa_prime if kappa_prime is not None else math.nan),
        ("linf_constant", linf if linf is not None else math.nan),
        ("bound_satisfied_all", table.bound_satisfied if do_bound else False),
    ])
    return status


def _write_convergence(out: Path, table):
    rows, details = [], []
    for r in table.rows:
        b = r.bound
        if b is not None:
            rows.append((r.h, r.alpha_h, r.l1_error, r.eoc, b.term1, b.term2, b.total, b.satisfied))
        else:
            rows.append((r.h, r.alpha_h, r.l1_error, r.eoc, math.nan, math.nan, math.nan, False))
        details.append((r.n, r.h, r.alpha_h, r.l1_error, r.iterations, r.residual, r.bang_bang_fraction,
                        b.error_sq if b else math.nan, b.gradient_gap if b else math.nan,
                        b.projection_error if b else math.nan, b.derivative_term if b else math.nan,
                        b.slack if b else math.nan))
    write_csv(out / "convergence.csv", ["h", "alpha_h", "l1_error", "eoc", "bound_term1", "bound_term2",
                                        "bound_total", "bound_satisfied"], rows)
    write_csv(out / "convergence_details.csv",
              ["n", "h", "alpha_h", "l1_error", "iterations", "residual", "bang_bang_fraction", "error_sq",
               "gradient_gap", "projection_error", "derivative_term", "slack"], details)


def cmd_analyze(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    from .analysis import check_first_order_growth, no_growth_demo
    from .problems import build_manufactured, build_reachable
    _, prob, _ = build_problem(cfg)
    p = cfg["problem"]
    a = cfg["analysis"]
    if prob is None:
        prob = build_manufactured(p["kind"], p["c"] if p["c"] else 1.0, (p["alpha"], p["beta"]))
    sl, mc = _structure(prob, a, a["seed"], a["mc_points"] if a["structure"] else None)
    if a["structure"]:
        rows = []
        for i, e in enumerate(sl.eps):
            rows.append((e, sl.measure[i], sl.ratios[i], mc.measure[i], mc.ratios[i], mc.stderr[i]))
        write_csv(out / "structure.csv", ["eps", "measure_slicing", "ratio_slicing", "measure_montecarlo",
                                          "ratio_montecarlo", "stderr_montecarlo"], rows)
        write_keyvalue(out / "structure.txt", [
            ("psi_max", sl.psi_max), ("K_slicing", sl.K), ("K_montecarlo", mc.K), ("kappa", sl.kappa),
            ("kappa_times_4_range_K", sl.kappa * 4.0 * (prob.beta - prob.alpha) * sl.K),
            ("mc_points", a["mc_points"]), ("seed", a["seed"])])
    if a["growth"]:
        mesh, ub, _ = _check_setup(prob, a["check_n"])
        g = check_first_order_growth(prob.spec, mesh, ub, sl.kappa, a["growth_samples"], a["seed"],
                                     prob.psi_bar, prob.switch)
        write_csv(out / "growth.csv", ["sample", "family", "l1_distance", "derivative", "kappa_term",
                                       "slack", "margin"], [(i,) + r for i, r in enumerate(g.rows)])
        write_keyvalue(out / "growth.txt", [("samples", g.n_samples), ("violations", g.violations),
                                            ("worst_margin", g.worst_margin), ("slack_constant", g.slack_constant),
                                            ("h", g.h), ("kappa", g.kappa)])
    if a["soc"]:
        reps = _soc_reports(prob, a, sl.kappa)
        write_csv(out / "soc.csv", ["tau", "n_directions", "min_rayleigh", "kappa", "kappa_prime",
                                    "verified", "max_method_gap"],
                  [(r.tau, r.n_directions, r.min_rayleigh, r.kappa, r.kappa_prime, r.verified, r.method_gap)
                   for r in reps])
    if a["no_growth"]:
        reach = build_reachable(p["kind"], (p["alpha"], p["beta"]))
        mesh = build_uniform_mesh(a["no_growth_n"])
        obj = ReducedObjective(reach.spec, mesh, alpha_h=0.0)
        ub = obj.problem.control(reach.control_value)
        delta = 0.5 * reach.margin * reach.omega.area
        table = no_growth_demo(reach.spec, mesh, ub, reach.omega, delta, a["k_list"])
        write_csv(out / "no_growth.csv", ["k", "l1_distance", "delta_J", "abs_delta_J"],
                  [(k, d, dj, abs(dj)) for k, d, dj in table.rows])
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "converge": cmd_converge, "analyze": cmd_analyze}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="bangbang", description="Bilinear bang-bang control experiments.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("config", help="INI configuration file")
    ap.add_argument("--output", help=f"output directory (overrides ${OUTPUT_ENV} and [output] directory)")
    ap.add_argument("--jobs", type=int, default=1, help="worker processes for independent mesh levels")
    args = ap.parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        if args.command != "converge" and cfg["problem"]["type"] == "custom":
            build_problem(cfg)
        out = prepare_output(cfg, args.output)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, out, args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, RuntimeError, ValueError, ArithmeticError) as exc:
        return _fail(out, exc, marker=True)


if __name__ == "__main__":
    sys.exit(main())
