import subprocess
import sys

import numpy as np
import pytest

from bangbang import kernels
from bangbang.assembly import RULE_D6, RULE_Q3
from bangbang.mesh import build_uniform_mesh

IMPLS = kernels.implementations()


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(7)
    m = build_uniform_mesh(12)
    E = m.n_elements
    return {
        "mesh": m,
        "local33": rng.standard_normal((E, 3, 3)),
        "local3": rng.standard_normal((E, 3)),
        "coeff": np.broadcast_to(np.array([[2.0, 0.3], [0.3, 1.0]]), (E, 2, 2)).copy(),
        "wq": rng.random((E, RULE_Q3.size)),
        "vq": rng.standard_normal((E, RULE_D6.size)),
        "nodal": rng.standard_normal(m.n_nodes),
    }


def run_all(impl, d):
    m = d["mesh"]
    _, indices, slots = m.csr_pattern
    return [
        kernels.scatter_add(slots, d["local33"], len(indices), impl),
        kernels.scatter_vector(m.elements, d["local3"], m.n_nodes, impl),
        kernels.stiffness_local(m.gradients, m.element_areas, d["coeff"], impl),
        kernels.weighted_mass_local(m.element_areas, d["wq"], RULE_Q3.bary, RULE_Q3.weights, impl),
        kernels.weighted_load_local(m.element_areas, d["vq"], RULE_D6.bary, RULE_D6.weights, impl),
        kernels.p1_at_points(d["nodal"], m.elements, RULE_D6.bary, impl),
    ]


def test_python_fallback_available():
    assert "python" in IMPLS
    assert kernels.BACKEND in IMPLS


@pytest.mark.skipif("compiled" not in IMPLS, reason="compiled extension not built")
def test_backends_agree(data):
    for a, b in zip(run_all(IMPLS["python"], data), run_all(IMPLS["compiled"], data)):
        assert a.shape == b.shape
        assert np.allclose(a, b, rtol=1e-14, atol=1e-14)


def test_scatter_vector_sums(data):
    m = data["mesh"]
    out = kernels.scatter_vector(m.elements, data["local3"], m.n_nodes)
    assert np.isclose(out.sum(), data["local3"].sum())


def test_forced_fallback_in_subprocess():
    code = "import bangbang.kernels as k; print(k.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                         env={"BANGBANG_PURE_PYTHON": "1", "PATH": ""}, check=True)
    assert out.stdout.strip() == "python"
