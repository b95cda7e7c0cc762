import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xpfl import quality as Q
from xpfl.numkit import DimensionError, ParameterError

img = arrays(np.float64, (6, 6), elements=st.floats(0, 1))


def test_psnr_values():
    x = np.zeros((4, 4))
    assert Q.psnr(x, x) == math.inf
    y = x + 0.1
    assert Q.psnr(x, y) == pytest.approx(20.0, abs=1e-9)
    assert Q.psnr(x * 255, y * 255, max_i=255) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ParameterError):
        Q.psnr(x, y, max_i=0)


def test_ssim_direct_formula(rng):
    x, y = rng.random((8, 8)), rng.random((8, 8))
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mx, my = x.mean(), y.mean()
    sxy = ((x - mx) * (y - my)).mean()
    want = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (x.var() + y.var() + c2))
    assert Q.ssim(x, y) == pytest.approx(want, abs=1e-14)


@given(img, img)
def test_ssim_bounded_and_symmetric(x, y):
    s = Q.ssim(x, y)
    assert -1.0 - 1e-12 <= s <= 1.0 + 1e-12
    assert s == pytest.approx(Q.ssim(y, x), abs=1e-15)


@given(img)
def test_ssim_identity(x):
    assert Q.ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        Q.mse(np.zeros(3), np.zeros(4))


def test_confusion_matches_counting(rng):
    p, t = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
    cm = Q.confusion(p, t, 4)
    for i in range(4):
        for j in range(4):
            assert cm[i, j] == np.sum((t == i) & (p == j))
    assert Q.accuracy_from_confusion(cm) == Q.accuracy(p, t)
    with pytest.raises(ParameterError):
        Q.confusion([5], [0], 4)


def test_per_class_accuracy():
    acc = Q.per_class_accuracy([0, 0, 1, 2], [0, 1, 1, 1], 3)
    np.testing.assert_allclose(acc, [1.0, 1 / 3, 0.0])
