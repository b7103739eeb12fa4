import os
import subprocess
import sys

import numpy as np
import pytest

from kgfewshot import _kernels

BACKENDS = _kernels.available_backends()
needs_c = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled kernels not built")


def _gated_args(rng, n=5, f=6):
    return [rng.normal(size=s) for s in
            [(n, f), (n, f), (1, f), (f, f), (f, f), (1, f), (f, f), (f, f), (1, f), (f, f), (f, f)]]


def test_python_backend_always_present():
    assert "python" in BACKENDS
    with pytest.raises(ValueError):
        _kernels.get_backend("fortran")


@needs_c
def test_gated_forward_backends_agree(rng):
    args = _gated_args(rng)
    py = _kernels.get_backend("python").gated_forward(*args)
    cy = _kernels.get_backend("cython").gated_forward(*args)
    for a, b in zip(py, cy):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


@needs_c
def test_gated_backward_backends_agree(rng):
    a, h, ub, wza, wzh, bz, wra, wrh, br, wua, wuh = _gated_args(rng)
    _, z, r, u = _kernels.get_backend("python").gated_forward(a, h, ub, wza, wzh, bz, wra, wrh, br, wua, wuh)
    g = rng.normal(size=h.shape)
    args = (g, a, h, z, r, u, wza, wzh, wra, wrh, wua, wuh)
    py = _kernels.get_backend("python").gated_backward(*args)
    cy = _kernels.get_backend("cython").gated_backward(*args)
    assert len(py) == len(cy) == 11
    for x, y in zip(py, cy):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)


@needs_c
def test_ap_columns_backends_agree_with_ties(rng):
    scores = np.round(rng.random((40, 7)), 1)  # many ties
    truths = (rng.random((40, 7)) > 0.6).astype(float)
    truths[:, 3] = 0
    py = _kernels.get_backend("python").ap_columns(scores, truths)
    cy = _kernels.get_backend("cython").ap_columns(scores, truths)
    assert np.isnan(py[3]) and np.isnan(cy[3])
    np.testing.assert_allclose(py, cy, rtol=0, atol=1e-12, equal_nan=True)


def test_gated_update_convex_combination(rng):
    args = _gated_args(rng)
    h_new, z, r, u = _kernels.get_backend("python").gated_forward(*args)
    h = args[1]
    np.testing.assert_allclose(h_new, (1 - z) * h + z * u)
    assert np.all((z > 0) & (z < 1) & (r > 0) & (r < 1))


def test_env_forces_fallback():
    env = dict(os.environ, KGFEWSHOT_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from kgfewshot import _kernels; print(_kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
