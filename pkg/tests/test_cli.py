import csv
import filecmp
import subprocess
import sys

import numpy as np
import pytest

from bangbang.cli import EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, OUTPUT_ENV, ConfigError, load_config, main

ZERO_SOURCE = """
[problem]
type = custom
source = 0
target = 0
nonlinearity = cubic
alpha = 0.25

[mesh]
n = 8
"""

SMALL = """
[problem]
type = manufactured
kind = linear

[mesh]
n = 8
levels = 8, 16, 24, 32
"""


def _write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _column(path, name):
    with open(path) as fh:
        return np.array([float(r[name]) for r in csv.DictReader(fh)])


def _report(path):
    return dict(line.strip().split(" = ", 1) for line in open(path) if line.strip())


def test_solve_zero_source(tmp_path):
    out = tmp_path / "out"
    assert main(["solve", _write(tmp_path, ZERO_SOURCE), "--output", str(out)]) == EXIT_OK
    assert np.all(_column(out / "state.csv", "value") == 0.0)
    assert np.all(_column(out / "adjoint.csv", "value") == 0.0)
    assert np.allclose(_column(out / "control.csv", "value"), 0.25)
    rep = _report(out / "report.txt")
    assert rep["converged"] == "true" and rep["problem"] == "custom"
    for name in ("config.ini", "config_resolved.ini", "VERSION"):
        assert (out / name).exists()
    assert "kernels" in (out / "VERSION").read_text()
    assert not (out / "INCOMPLETE").exists()


def test_solve_rerun_identical(tmp_path):
    cfg = _write(tmp_path, SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["solve", cfg, "--output", str(a)]) == EXIT_OK
    assert main(["solve", cfg, "--output", str(b)]) == EXIT_OK
    for name in ("control.csv", "state.csv", "adjoint.csv"):
        assert filecmp.cmp(a / name, b / name, shallow=False)


@pytest.mark.parametrize("text", [
    "[problem]\nunknown_key = 1\n",
    "[solver]\nn = 3\n",
    "[mesh]\nn = many\n",
    "[problem]\nalpha = 2\nbeta = 1\n",
    "[problem]\nc = 0\n",
    "[optimizer]\ntol = -1\n",
    "[problem]\ntype = custom\nsource = x1 +* 2\n",
    "[problem]\ntype = custom\nsource = undefined_name\n",
])
def test_bad_config_exits_with_code_2(tmp_path, text):
    out = tmp_path / "out"
    assert main(["solve", _write(tmp_path, text), "--output", str(out)]) == EXIT_CONFIG
    assert not (out / "control.csv").exists()


def test_missing_config_file(tmp_path):
    assert main(["solve", str(tmp_path / "absent.ini")]) == EXIT_CONFIG
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")


def test_converge_needs_manufactured_problem_and_levels(tmp_path):
    out = str(tmp_path / "o")
    assert main(["converge", _write(tmp_path, "[problem]\ntype = reachable\n"), "--output", out]) == EXIT_CONFIG
    assert main(["converge", _write(tmp_path, "[mesh]\nlevels = 8, 16\n"), "--output", out]) == EXIT_CONFIG


def test_jobs_must_be_positive(tmp_path):
    assert main(["solve", _write(tmp_path, SMALL), "--jobs", "0"]) == EXIT_CONFIG


def test_output_directory_precedence(tmp_path, monkeypatch):
    cfg = _write(tmp_path, ZERO_SOURCE + f"\n[output]\ndirectory = {tmp_path / 'from_config'}\n")
    assert main(["solve", cfg]) == EXIT_OK
    assert (tmp_path / "from_config" / "control.csv").exists()
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "from_env"))
    assert main(["solve", cfg]) == EXIT_OK
    assert (tmp_path / "from_env" / "control.csv").exists()
    assert main(["solve", cfg, "--output", str(tmp_path / "from_flag")]) == EXIT_OK
    assert (tmp_path / "from_flag" / "control.csv").exists()


def test_solve_iteration_cap_is_solver_failure(tmp_path):
    out = tmp_path / "out"
    cfg = _write(tmp_path, SMALL + "\n[optimizer]\nmax_iter = 1\n")
    assert main(["solve", cfg, "--output", str(out)]) == EXIT_SOLVER
    assert (out / "failure.txt").exists() and (out / "report.txt").exists()
    assert _report(out / "report.txt")["converged"] == "false"


def test_converge_failure_marks_incomplete(tmp_path):
    out = tmp_path / "out"
    cfg = _write(tmp_path, SMALL + "\n[optimizer]\nmax_iter = 1\n[analysis]\nbound = false\n")
    with pytest.warns(Warning):
        code = main(["converge", cfg, "--output", str(out)])
    assert code == EXIT_SOLVER
    assert (out / "INCOMPLETE").exists() and (out / "failure.txt").exists()
    assert (out / "convergence.csv").exists()
    # a later successful run clears the markers
    cfg_ok = _write(tmp_path, SMALL + "\n[analysis]\nbound = false\n", "ok.ini")
    assert main(["converge", cfg_ok, "--output", str(out)]) == EXIT_OK
    assert not (out / "INCOMPLETE").exists() and not (out / "failure.txt").exists()
    rows = list(csv.DictReader(open(out / "convergence.csv")))
    assert [float(r["h"]) for r in rows] == pytest.approx([np.sqrt(2) / n for n in (8, 16, 24, 32)])
    assert set(rows[0]) >= {"h", "alpha_h", "l1_error", "eoc", "bound_term1", "bound_term2"}


def test_analyze_writes_tables(tmp_path):
    out = tmp_path / "out"
    cfg = _write(tmp_path, SMALL + """
[analysis]
mc_points = 4096
growth_samples = 20
n_dirs = 5
check_n = 8
no_growth_n = 32
k_list = 2, 4, 8
""")
    assert main(["analyze", cfg, "--output", str(out)]) == EXIT_OK
    for name in ("structure.csv", "structure.txt", "growth.csv", "growth.txt", "soc.csv", "no_growth.csv"):
        assert (out / name).exists(), name
    assert _report(out / "growth.txt")["violations"] == "0"
    K = float(_report(out / "structure.txt")["K_slicing"])
    assert _column(out / "structure.csv", "ratio_slicing").max() == K
    dist = _column(out / "no_growth.csv", "l1_distance")
    dJ = _column(out / "no_growth.csv", "abs_delta_J")
    assert len(dist) == 3 and np.ptp(dist) <= 1e-12
    # k = 2 and k = 4 stripes are mirror images on omega and tie
    assert np.all(dJ[1:] <= dJ[:-1] * (1.0 + 1e-6)) and dJ[-1] < 0.5 * dJ[0]
    soc = list(csv.DictReader(open(out / "soc.csv")))
    assert len(soc) == 3 and all(r["verified"] == "true" for r in soc)


def test_module_entry_point(tmp_path):
    out = tmp_path / "out"
    res = subprocess.run([sys.executable, "-m", "bangbang", "solve", _write(tmp_path, ZERO_SOURCE),
                          "--output", str(out)], capture_output=True, text=True)
    assert res.returncode == EXIT_OK, res.stderr
    assert (out / "control.csv").exists()
