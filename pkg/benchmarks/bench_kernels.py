"""Time the element kernels of both backends and a full assembly + state solve.

    python benchmarks/bench_kernels.py [--n 256] [--repeat 5]
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from bangbang import kernels
from bangbang.assembly import RULE_D6, RULE_Q3
from bangbang.mesh import build_uniform_mesh


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(n):
    rng = np.random.default_rng(0)
    m = build_uniform_mesh(n)
    E = m.n_elements
    _, indices, slots = m.csr_pattern
    local33 = rng.standard_normal((E, 3, 3))
    local3 = rng.standard_normal((E, 3))
    coeff = np.broadcast_to(np.eye(2), (E, 2, 2)).copy()
    wq = rng.random((E, RULE_Q3.size))
    vq = rng.standard_normal((E, RULE_D6.size))
    nodal = rng.standard_normal(m.n_nodes)
    grads, areas = m.gradients, m.element_areas
    return {
        "scatter_add": lambda impl: kernels.scatter_add(slots, local33, len(indices), impl),
        "scatter_vector": lambda impl: kernels.scatter_vector(m.elements, local3, m.n_nodes, impl),
        "stiffness_local": lambda impl: kernels.stiffness_local(grads, areas, coeff, impl),
        "weighted_mass_local": lambda impl: kernels.weighted_mass_local(areas, wq, RULE_Q3.bary, RULE_Q3.weights, impl),
        "weighted_load_local": lambda impl: kernels.weighted_load_local(areas, vq, RULE_D6.bary, RULE_D6.weights, impl),
        "p1_at_points": lambda impl: kernels.p1_at_points(nodal, m.elements, RULE_D6.bary, impl),
    }


END_TO_END = """
import time
from bangbang import kernels
from bangbang.mesh import build_uniform_mesh
from bangbang.pde import DiscreteProblem
from bangbang.problems import build_manufactured
p = build_manufactured("cubic")
mesh = build_uniform_mesh({n})
t0 = time.perf_counter()
d = DiscreteProblem(p.spec, mesh)
y, rep = d.state(p.u_bar_field(d.region))
print(kernels.BACKEND, time.perf_counter() - t0, rep.iterations)
"""


def end_to_end(n, pure):
    env = dict(os.environ, BANGBANG_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", END_TO_END.format(n=n)], env=env,
                         capture_output=True, text=True, check=True)
    backend, seconds, its = out.stdout.split()
    return backend, float(seconds), int(its)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = kernels.implementations()
    cases = kernel_cases(args.n)
    names = sorted(impls)
    print(f"mesh n={args.n} ({2 * args.n ** 2} elements), best of {args.repeat}")
    print(f"{'kernel':<22}" + "".join(f"{k:>12}" for k in names) + ("     speedup" if len(names) > 1 else ""))
    for label, fn in cases.items():
        t = {k: best_of(lambda: fn(impls[k]), args.repeat) for k in names}
        row = f"{label:<22}" + "".join(f"{t[k] * 1e3:>10.2f}ms" for k in names)
        if "compiled" in t:
            row += f"{t['python'] / t['compiled']:>11.1f}x"
        print(row)
    print("\nassembly + cubic state solve")
    for pure in (True, False):
        backend, seconds, its = end_to_end(args.n, pure)
        print(f"  {backend:<10}{seconds:8.3f}s  ({its} Newton steps)")


if __name__ == "__main__":
    main()
