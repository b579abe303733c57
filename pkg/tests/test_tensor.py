import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cioho import tensor as T
from cioho.tensor import NonFiniteError, Tensor
from oracles import huber_scalar, numeric_grad, rel_error


def check_grad(build, *shapes, seed=0, tol=1e-6):
    """Compare tape gradients of ``sum(build(*xs) * w)`` with central differences."""
    rng = np.random.default_rng(seed)
    xs = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    out = build(*xs)
    w = rng.normal(size=out.shape)
    T.sum(T.mul(out, w)).backward()
    for x in xs:
        num = numeric_grad(lambda: float((build(*xs).data * w).sum()), x.data)
        assert rel_error(x.grad, num) < tol


@pytest.mark.parametrize("op, shapes", [
    (T.add, [(3, 4), (4,)]),
    (T.sub, [(3, 1), (1, 4)]),
    (T.mul, [(2, 3, 4), (3, 1)]),
    (T.matmul, [(3, 4), (4, 2)]),
    (T.matmul, [(5, 3, 4), (4, 2)]),
    (T.matmul, [(6, 3), (2, 3, 4)]),
    (T.matmul, [(4,), (4, 3)]),
])
def test_binary_ops_gradients(op, shapes):
    check_grad(op, *shapes)


@pytest.mark.parametrize("build, shape", [
    (T.relu, (4, 5)),
    (lambda x: T.softmax(x, axis=-1), (3, 7)),
    (lambda x: T.softmax(x, axis=0), (3, 7)),
    (lambda x: T.huber(x * 2.0, 1.0), (20,)),
    (lambda x: T.sum(x, axis=1), (3, 4, 2)),
    (lambda x: T.sum(x, axis=1, keepdims=True), (3, 4)),
    (lambda x: T.mean(x, axis=(0, 2)), (3, 4, 2)),
    (lambda x: T.reshape(x, (6, 2)), (3, 4)),
    (lambda x: x[1:, ::2], (4, 5)),
    (lambda x: T.take(x, [2, 0, 2], axis=1), (3, 4)),
    (lambda x: T.concat([x, x * x], axis=0), (2, 3)),
])
def test_unary_ops_gradients(build, shape):
    check_grad(build, shape)


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = x * x + x * 3.0
    T.sum(y).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_backward_requires_scalar_or_seed():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()
    (x * 2.0).backward(np.ones(3))
    np.testing.assert_allclose(x.grad, 2.0)


def test_constants_get_no_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.arange(3.0))
    T.sum(x * c).backward()
    assert c.grad is None


def test_non_finite_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    p = T.softmax(x).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(p, T.softmax(x + 123.0).data, atol=1e-12)


def test_softmax_of_large_logits_is_stable():
    p = T.softmax_array(np.array([1000.0, 0.0, -1000.0]))
    assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0)


@pytest.mark.parametrize("x, delta", [(0.0, 1.0), (0.3, 1.0), (-1.0, 1.0), (2.5, 1.0), (-7.0, 0.5), (1e-9, 2.0)])
def test_huber_matches_scalar_definition(x, delta):
    assert T.huber_array(np.array([x]), delta)[0] == pytest.approx(huber_scalar(x, delta), abs=1e-12)


def test_huber_knee_is_continuous():
    d = 0.7
    assert T.huber_array(np.array([d]), d)[0] == pytest.approx(d * d / 2, abs=1e-15)
    assert d * (d - d / 2) == pytest.approx(d * d / 2, abs=1e-15)
    assert T.huber_array(np.array([3.0]), 1.0)[0] == 2.5


def test_huber_gradient_is_clipped_residual():
    x = Tensor(np.array([-3.0, -0.5, 0.0, 0.4, 2.0]), requires_grad=True)
    T.sum(T.huber(x, 1.0)).backward()
    np.testing.assert_allclose(x.grad, [-1.0, -0.5, 0.0, 0.4, 1.0])


def test_huber_rejects_bad_delta():
    with pytest.raises(ValueError):
        T.huber_array(np.zeros(2), 0.0)
