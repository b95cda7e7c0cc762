import os
import subprocess
import sys

import numpy as np
import pytest

from xpfl import _jit, kernels

pytestmark = pytest.mark.skipif(not _jit.HAVE_NUMBA, reason="numba not installed")


def both(name):
    return kernels.implementation(name, "numpy"), kernels.implementation(name, "numba")


def test_im2col_col2im_agree(rng):
    x = rng.standard_normal((2, 3, 5, 6))
    a, b = both("im2col")
    np.testing.assert_allclose(a(x, 3, 3, 1), b(x, 3, 3, 1), atol=1e-15)
    cols = rng.standard_normal((2, 30, 27))
    a, b = both("col2im")
    np.testing.assert_allclose(a(cols, x.shape, 3, 3, 1), b(cols, x.shape, 3, 3, 1), atol=1e-13)


def test_col2im_is_adjoint_of_im2col(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    c = rng.standard_normal((1, 16, 18))
    lhs = np.sum(kernels.im2col(x, 3, 3, 1) * c)
    rhs = np.sum(x * kernels.col2im(c, x.shape, 3, 3, 1))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_perplexity_agree(rng):
    X = rng.standard_normal((15, 3))
    D2 = ((X[:, None] - X[None]) ** 2).sum(-1)
    a, b = both("perplexity")
    pa, ba = a(D2, 5.0, 1e-5, 200)
    pb, bb = b(D2, 5.0, 1e-5, 200)
    np.testing.assert_allclose(pa, pb, atol=1e-14)
    np.testing.assert_allclose(ba, bb, rtol=1e-12)


def test_tsne_grad_agree(rng):
    Y = rng.standard_normal((12, 2))
    P = rng.random((12, 12))
    P = P + P.T
    np.fill_diagonal(P, 0)
    P /= P.sum()
    a, b = both("tsne_grad")
    for u, v in zip(a(Y, P, 4.0), b(Y, P, 4.0)):
        np.testing.assert_allclose(u, v, atol=1e-14)


def test_split_scan_agree(rng):
    for _ in range(20):
        X = np.round(rng.random((40, 5)), 2)
        y = rng.integers(0, 3, 40)
        a, b = both("split_scan")
        for u, v in zip(a(X, y, 3, 3), b(X, y, 3, 3)):
            np.testing.assert_allclose(u, v, atol=1e-12)


def test_env_flag_selects_numpy():
    env = dict(os.environ, XPFL_DISABLE_JIT="1")
    out = subprocess.run([sys.executable, "-c", "import xpfl; print(xpfl.backend())"],
                         capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "numpy"


def test_numpy_backend_returns_numpy_kernel():
    assert kernels.implementation("im2col", "numpy") is kernels.im2col_numpy
