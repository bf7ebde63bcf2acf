import os
import subprocess
import sys

import numpy as np
import pytest

from imconnect import _kernels_py as py
from imconnect import kernels

try:
    from imconnect import _kernels as cy
except ImportError:  # extension not built
    cy = None

needs_ext = pytest.mark.skipif(cy is None, reason="compiled extension not built")


def fd(f, x, h=1e-6):
    return (f(x + h) - f(x - h)) / (2 * h)


def test_backend_is_reported():
    assert kernels.BACKEND in ("cython", "python")
    if cy is not None and os.environ.get("IMCONNECT_PURE_PYTHON") != "1":
        assert kernels.BACKEND == "cython"


def test_pure_python_override():
    code = "import imconnect.kernels as k; print(k.BACKEND)"
    env = {**os.environ, "IMCONNECT_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_gelu_reference_values():
    x = np.array([0.0, 1.0, -1.0, 3.0])
    c = np.sqrt(2.0 / np.pi)
    ref = 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(py.gelu(x), ref, rtol=0, atol=1e-15)
    assert py.gelu(np.array([0.0]))[0] == 0.0


@pytest.mark.parametrize("name,deriv", [("gelu", "gelu_grad"), ("gelu_grad", "gelu_grad2")])
def test_gelu_derivatives_match_fd(name, deriv):
    x = np.linspace(-6, 6, 241)
    f = getattr(py, name)
    np.testing.assert_allclose(getattr(py, deriv)(x), fd(f, x), atol=1e-8)


@needs_ext
@pytest.mark.parametrize("name", ["gelu", "gelu_grad", "gelu_grad2"])
def test_compiled_gelu_family_matches_fallback(name):
    rng = np.random.default_rng(0)
    for shape in [(), (7,), (3, 5), (2, 4, 6)]:
        x = rng.normal(scale=3, size=shape)
        a = getattr(cy, name)(x)
        b = getattr(py, name)(x)
        assert np.shape(a) == np.shape(b) == shape
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


@needs_ext
@pytest.mark.parametrize("gl", [-0.5, -1.0, -1.9, -2.0, -2.5, -3.7, -1e-3])
@pytest.mark.parametrize("which", ["explicit_errors", "implicit_errors"])
def test_compiled_recurrences_bit_identical(gl, which):
    a, da = getattr(cy, which)(gl, 1.25, 300, 1e300)
    b, db = getattr(py, which)(gl, 1.25, 300, 1e300)
    assert da == db
    np.testing.assert_array_equal(np.asarray(a), np.asarray(b))


@needs_ext
@pytest.mark.parametrize("implicit", [False, True])
def test_compiled_scan_bit_identical(implicit):
    lam = np.linspace(-4, -0.05, 17)
    gam = np.linspace(0.05, 3, 13)
    a = cy.scan_final_errors(lam, gam, 1.0, 200, implicit, 1e300)
    b = py.scan_final_errors(lam, gam, 1.0, 200, implicit, 1e300)
    np.testing.assert_array_equal(np.asarray(a), np.asarray(b))


def test_explicit_recurrence_stops_after_cutoff():
    e, diverged = kernels.explicit_errors(-5.0, 1.0, 1000, 1e300)
    e = np.asarray(e)
    assert diverged
    assert abs(e[-1]) > 1e300 and np.all(np.abs(e[:-1]) <= 1e300)
    assert len(e) < 1001


def test_recurrence_lengths_without_divergence():
    e, d = kernels.implicit_errors(-1.0, 1.0, 50, 1e300)
    assert not d and len(e) == 51 and e[0] == 1.0
