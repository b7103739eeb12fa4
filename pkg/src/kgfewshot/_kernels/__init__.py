"""Hot kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports; setting
``KGFEWSHOT_PURE_PYTHON=1`` forces the fallback. ``BACKEND`` names the
active choice. Both backends are always importable by name for tests and
benchmarks via :func:`get_backend`.
"""

import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_FORCE_PY = os.environ.get("KGFEWSHOT_PURE_PYTHON", "") not in ("", "0")


def available_backends():
    names = ["python"]
    if _ckernels is not None:
        names.append("cython")
    return names


def get_backend(name):
    if name == "python":
        return _pykernels
    if name == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built")
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


BACKEND = "python" if (_FORCE_PY or _ckernels is None) else "cython"
_impl = get_backend(BACKEND)


def _c(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def gated_forward(a, h, ub, wza, wzh, bz, wra, wrh, br, wua, wuh):
    return _impl.gated_forward(*(_c(x) for x in (a, h, ub, wza, wzh, bz, wra, wrh, br, wua, wuh)))


def gated_backward(g, a, h, z, r, u, wza, wzh, wra, wrh, wua, wuh):
    return _impl.gated_backward(*(_c(x) for x in (g, a, h, z, r, u, wza, wzh, wra, wrh, wua, wuh)))


def ap_columns(scores, truths):
    return _impl.ap_columns(_c(scores), _c(truths))
