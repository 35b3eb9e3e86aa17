"""Element kernels: compiled extension when importable, numpy fallback otherwise.

Set BANGBANG_PURE_PYTHON=1 to force the fallback.  ``BACKEND`` names the
implementation in use.
"""
import os

import numpy as np

from . import _kernels_py

_FORCE_PY = os.environ.get("BANGBANG_PURE_PYTHON", "") not in ("", "0")

try:
    if _FORCE_PY:
        raise ImportError("fallback forced")
    from . import _kernels as _impl
    BACKEND = "compiled"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"


def _c(a, dtype=float):
    return np.ascontiguousarray(a, dtype=dtype)


def scatter_add(slots, local, nnz, impl=None):
    impl = impl or _impl
    return impl.scatter_add(_c(slots, np.int64), _c(local), int(nnz))


def scatter_vector(elements, local, n, impl=None):
    impl = impl or _impl
    return impl.scatter_vector(_c(elements, np.int64), _c(local), int(n))


def stiffness_local(grads, areas, coeff, impl=None):
    impl = impl or _impl
    return impl.stiffness_local(_c(grads), _c(areas), _c(coeff))


def weighted_mass_local(areas, wvals, phi, qw, impl=None):
    impl = impl or _impl
    return impl.weighted_mass_local(_c(areas), _c(wvals), _c(phi), _c(qw))


def weighted_load_local(areas, vals, phi, qw, impl=None):
    impl = impl or _impl
    return impl.weighted_load_local(_c(areas), _c(vals), _c(phi), _c(qw))


def p1_at_points(nodal, elements, phi, impl=None):
    impl = impl or _impl
    return impl.p1_at_points(_c(nodal), _c(elements, np.int64), _c(phi))


def implementations():
    """Available backends by name, for benchmarks and cross-checks."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels
        out["compiled"] = _kernels
    except ImportError:
        pass
    return out
