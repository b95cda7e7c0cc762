import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import rel_error
from xpfl import numkit as nk


def check_grad(build, *shapes, rng, tol=1e-6, positive=False):
    """Compare tape gradients of scalar ``build(*tensors)`` with central differences."""
    xs = [rng.standard_normal(s) for s in shapes]
    if positive:
        xs = [np.abs(x) + 0.5 for x in xs]
    ts = [nk.Tensor(x, requires_grad=True) for x in xs]
    with nk.GradTape() as tape:
        loss = build(*ts)
    tape.backward(loss)
    for t, x in zip(ts, xs):
        num = nk.numeric_grad(lambda: build(*[nk.Tensor(v) for v in xs]).item(), x)
        assert rel_error(t.grad, num) < tol


W = np.random.default_rng(7).standard_normal(64)


def wsum(t):
    """Random linear functional so every output element matters."""
    flat = nk.reshape(t, (int(np.prod(t.shape)),))
    return nk.sum(nk.mul(flat, W[: flat.shape[0]]))


@pytest.mark.parametrize("op", [nk.add, nk.sub, nk.mul])
def test_binary_broadcast_grads(op, rng):
    check_grad(lambda a, b: wsum(op(a, b)), (3, 4), (4,), rng=rng)
    check_grad(lambda a, b: wsum(op(a, b)), (2, 1, 3), (1, 4, 1), rng=rng)


def test_div_grad(rng):
    check_grad(lambda a, b: wsum(nk.div(a, b)), (3, 4), (3, 1), rng=rng, positive=True)


def test_matmul_grad_batched(rng):
    check_grad(lambda a, b: wsum(nk.matmul(a, b)), (2, 3, 4), (4, 5), rng=rng)
    check_grad(lambda a, b: wsum(nk.matmul(a, b)), (3, 4), (2, 4, 1), rng=rng)


@pytest.mark.parametrize("fn", [nk.relu, nk.exp, nk.tanh, nk.square])
def test_unary_grads(fn, rng):
    check_grad(lambda a: wsum(fn(a)), (3, 5), rng=rng)


def test_log_grad(rng):
    check_grad(lambda a: wsum(nk.log(a)), (3, 5), rng=rng, positive=True)


def test_reductions_and_shape_ops(rng):
    check_grad(lambda a: wsum(nk.sum(a, axis=1)), (3, 4, 2), rng=rng)
    check_grad(lambda a: wsum(nk.mean(a, axis=(0, 2), keepdims=True)), (3, 4, 2), rng=rng)
    check_grad(lambda a: wsum(nk.transpose(nk.reshape(a, (4, 6)), (1, 0))), (2, 3, 4), rng=rng)
    check_grad(lambda a: wsum(nk.broadcast_to(a, (3, 4))), (4,), rng=rng)
    check_grad(lambda a, b: wsum(nk.concat([a, b], axis=1)), (2, 3), (2, 2), rng=rng)


def test_gather_grad_with_repeats(rng):
    idx = np.array([[0, 2, 2], [1, 1, 0]])
    check_grad(lambda a: wsum(nk.gather(a, idx, axis=1)), (2, 3, 4), rng=rng)


@pytest.mark.parametrize("tau", [0.5, 1.0, 3.0])
def test_softmax_family_grads(tau, rng):
    check_grad(lambda a: wsum(nk.softmax_tau(a, tau)), (3, 5), rng=rng)
    check_grad(lambda a: wsum(nk.log_softmax(a, tau=tau)), (3, 5), rng=rng)


def test_layer_norm_grad(rng):
    check_grad(lambda x, g, b: wsum(nk.layer_norm(x, g, b)), (2, 3, 6), (6,), (6,), rng=rng)


def test_cross_entropy_grad(rng):
    labels = np.array([1, 0, 3])
    check_grad(lambda z: nk.cross_entropy(z, labels), (3, 4), rng=rng)


def test_conv_and_pool_grads(rng):
    check_grad(lambda x, w, b: wsum(nk.maxpool2d(nk.conv2d(x, w, b, pad=1))), (1, 2, 4, 4), (2, 2, 3, 3), (2,),
               rng=rng)


def test_conv2d_matches_direct_loops(rng):
    x = rng.standard_normal((2, 3, 5, 4))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = nk.conv2d(x, w, b, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((2, 4, 5, 4))
    for n in range(2):
        for o in range(4):
            for i in range(5):
                for j in range(4):
                    want[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_shared_node_gradients_accumulate():
    x = nk.Tensor(np.array([1.5, -2.0]), requires_grad=True)
    with nk.GradTape() as tape:
        y = nk.sum(nk.add(nk.mul(x, x), x))
    tape.backward(y)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_tape_cannot_be_replayed():
    x = nk.Tensor(np.ones(3), requires_grad=True)
    with nk.GradTape() as tape:
        y = nk.sum(x)
    tape.backward(y)
    with pytest.raises(nk.UsageError):
        tape.backward(y)


def test_foreign_loss_rejected():
    x = nk.Tensor(np.ones(3), requires_grad=True)
    with nk.GradTape():
        z = nk.sum(nk.mul(x, 3.0))
    with pytest.raises(nk.UsageError):
        nk.GradTape().backward(z)


def test_non_scalar_loss_rejected():
    x = nk.Tensor(np.ones(3), requires_grad=True)
    with nk.GradTape() as tape:
        w = nk.mul(x, 2.0)
    with pytest.raises(nk.UsageError):
        tape.backward(w)


def test_no_tape_means_no_recording():
    x = nk.Tensor(np.ones(2), requires_grad=True)
    y = nk.sum(nk.mul(x, 2.0))
    assert y._tape is None and x.grad is None


def test_cross_entropy_examples():
    assert nk.cross_entropy(np.zeros(4), 2).item() == pytest.approx(math.log(4), abs=1e-12)
    z = np.zeros(4)
    z[1] = 1e6
    assert nk.cross_entropy(z, 1).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_direct_formula(rng):
    for _ in range(10):
        z = rng.standard_normal((5, 6)) * 3
        y = rng.integers(0, 6, 5)
        direct = np.mean([-z[i, y[i]] + math.log(sum(math.exp(v) for v in z[i])) for i in range(5)])
        assert nk.cross_entropy(z, y).item() == pytest.approx(direct, abs=1e-12)


def test_softmax_tau_direct():
    z = np.array([1.0, 2.0, 3.0])
    e = np.exp(z / 2.0)
    np.testing.assert_allclose(nk.softmax_tau(z, 2.0).data, e / e.sum(), atol=1e-15)
    with pytest.raises(nk.ParameterError):
        nk.softmax_tau(z, 0.0)


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)),
       st.floats(0.1, 10.0))
def test_softmax_is_a_distribution(z, tau):
    s = nk.softmax_tau(z, tau).data
    assert np.all(s >= 0)
    assert s.sum() == pytest.approx(1.0, abs=1e-12)


def test_kl_divergence():
    p = np.array([0.5, 0.5, 0.0])
    q = np.array([0.25, 0.25, 0.5])
    assert nk.kl_divergence(p, q) == pytest.approx(math.log(2), abs=1e-15)
    assert nk.kl_divergence(p, p) == 0.0
    with pytest.raises(nk.DimensionError):
        nk.kl_divergence(p, q[:2])


def test_cosine_weight_identities(rng):
    w = rng.standard_normal(10)
    assert nk.cosine_weight(w, w) == pytest.approx(1.0, abs=1e-12)
    assert nk.cosine_weight(w, -w) == pytest.approx(0.0, abs=1e-12)
    assert nk.cosine_weight([1.0, 0.0], [0.0, 3.0]) == 0.5
    assert nk.cosine_weight(np.zeros(3), [1.0, 2.0, 3.0]) == 0.5


@given(arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)))
def test_cosine_weight_range_and_symmetry(a, b):
    psi = nk.cosine_weight(a, b)
    assert 0.0 <= psi <= 1.0
    assert psi == nk.cosine_weight(b, a)


def test_make_rng_streams():
    a = nk.make_rng(3, 1, 2).random(5)
    b = nk.make_rng(3, 1, 2).random(5)
    c = nk.make_rng(3, 2, 1).random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_numeric_grad_restores_input():
    x = np.array([1.0, 2.0])
    g = nk.numeric_grad(lambda: float(np.sum(x ** 3)), x)
    np.testing.assert_allclose(g, 3 * np.array([1.0, 4.0]), rtol=1e-8)
    np.testing.assert_array_equal(x, [1.0, 2.0])
