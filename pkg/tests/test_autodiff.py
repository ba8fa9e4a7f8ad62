"""Op-level gradient checks for the reverse-mode tape."""

import numpy as np
import pytest

from lcpred import autodiff as ad
from lcpred.autodiff import Tensor


def _fd_grad(fn, x, eps=1e-6):
    """Central finite-difference gradient of a scalar-valued fn of one array."""
    g = np.zeros_like(x, dtype=float)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def _check(make_graph, *shapes, seed=0, tol=1e-6):
    """Compare tape gradients with finite differences for each input."""
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = make_graph(*tensors)
    out.backward()
    for i, (arr, tensor) in enumerate(zip(arrays, tensors)):
        def scalar(x, i=i):
            tmp = [Tensor(a) for a in arrays]
            tmp[i] = Tensor(x)
            return float(make_graph(*tmp).data)
        fd = _fd_grad(scalar, arr.copy())
        np.testing.assert_allclose(tensor.grad, fd, atol=tol,
                                   err_msg=f"input {i}")


def _total(t):
    # reduce to a scalar through ops already under test-free reshape/matmul
    flat = ad.reshape(t, (1, -1))
    ones = Tensor(np.ones((flat.shape[1], 1)))
    return ad.reshape(ad.matmul(flat, ones), ())


def test_add_broadcasting():
    _check(lambda a, b: _total(ad.add(a, b)), (3, 4), (4,))
    _check(lambda a, b: _total(ad.add(a, b)), (2, 3, 4), (1, 4))


def test_mul_broadcasting():
    _check(lambda a, b: _total(ad.mul(a, b)), (3, 4), (3, 1))


def test_matmul_batched():
    _check(lambda a, b: _total(ad.matmul(a, b)), (2, 3, 4), (2, 4, 5))
    _check(lambda a, b: _total(ad.matmul(a, b)), (3, 4), (4, 2))


def test_scale_reshape_transpose():
    _check(lambda a: _total(ad.scale(ad.transpose(
        ad.reshape(a, (2, 3, 4)), (1, 0, 2)), 2.5)), (6, 4))


def test_relu():
    _check(lambda a: _total(ad.relu(a)), (5, 7))


def test_gelu():
    _check(lambda a: _total(ad.gelu(a)), (5, 7))


def test_mean_axis():
    _check(lambda a: _total(ad.mean(a, axis=1)), (4, 6, 3))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    y = ad.softmax(Tensor(rng.normal(size=(8, 5)) * 10)).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(y >= 0)


def test_softmax_gradient():
    w = np.random.default_rng(1).normal(size=(3, 5))

    def graph(a):
        return _total(ad.mul(ad.softmax(a), Tensor(w)))

    _check(graph, (3, 5))


def test_layer_norm_gradient():
    def graph(x, g, b):
        return _total(ad.layer_norm(x, g, b))

    _check(lambda x, g, b: _total(ad.mul(ad.layer_norm(x, g, b),
                                         Tensor(np.arange(24.0).reshape(4, 6)))),
           (4, 6), (6,), (6,), tol=1e-5)


def test_cross_entropy_matches_manual_and_gradcheck():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(6, 3))
    labels = rng.integers(0, 3, size=6)
    loss = ad.cross_entropy_with_logits(Tensor(z), labels)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    manual = -np.log(p[np.arange(6), labels]).mean()
    assert abs(float(loss.data) - manual) < 1e-12

    _check(lambda a: ad.cross_entropy_with_logits(a, labels), (6, 3))


def test_uniform_logits_loss_is_ln3():
    z = np.zeros((10, 3))
    labels = np.arange(10) % 3
    loss = ad.cross_entropy_with_logits(Tensor(z), labels)
    assert abs(float(loss.data) - np.log(3.0)) < 1e-9


def test_dropout_scaling_and_gradient():
    x = Tensor(np.ones((1000,)), requires_grad=True)
    out = ad.dropout(x, 0.4, np.random.default_rng(0))
    kept = out.data != 0
    np.testing.assert_allclose(out.data[kept], 1.0 / 0.6)
    assert abs(kept.mean() - 0.6) < 0.05
    _total(out).backward()
    np.testing.assert_allclose(x.grad[kept], 1.0 / 0.6)
    np.testing.assert_allclose(x.grad[~kept], 0.0)
    # p=0 is the identity
    assert ad.dropout(x, 0.0, None) is x


def test_shared_node_accumulates_gradient():
    a = Tensor(np.array([2.0]), requires_grad=True)
    out = _total(ad.add(ad.mul(a, a), a))  # f = a^2 + a, f' = 2a + 1
    out.backward()
    np.testing.assert_allclose(a.grad, [5.0])


def test_backward_requires_scalar():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        ad.add(a, a).backward()
