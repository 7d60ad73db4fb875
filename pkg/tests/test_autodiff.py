import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from car_retrieval import autodiff as ad
from car_retrieval.autodiff import BackwardError, DimensionError, DomainError, Tensor, grad_check

TOL = 1e-4


def t(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0, scale, shape), requires_grad=True)


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_binary_elementwise_grads(rng, op):
    b = Tensor(rng.normal(size=(3, 4)))
    fn = getattr(ad, op)
    assert grad_check(lambda x: fn(x, b).sum(), t(rng, 3, 4)) < TOL
    assert grad_check(lambda x: fn(b, x).sum(), t(rng, 3, 4)) < TOL


@pytest.mark.parametrize("op", ["tanh", "exp", "relu", "neg"])
def test_unary_grads(rng, op):
    w = Tensor(rng.normal(size=(2, 5)))
    assert grad_check(lambda x: (getattr(ad, op)(x) * w).sum(), t(rng, 2, 5)) < TOL


def test_log_grad_and_domain(rng):
    x = Tensor(rng.uniform(0.5, 2.0, (3, 3)), requires_grad=True)
    assert grad_check(lambda v: ad.log(v).sum(), x) < TOL
    with pytest.raises(DomainError):
        ad.log(Tensor(np.array([1.0, 0.0])))


def test_scalar_broadcast_only():
    a = Tensor(np.ones((2, 3)))
    assert np.all((a + 2.0).data == 3.0)
    assert np.all((2.0 - a).data == 1.0)
    with pytest.raises(DimensionError):
        a + Tensor(np.ones(3))


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    ad.relu(x).sum().backward()
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


@pytest.mark.parametrize("axis", [None, 0, 1])
def test_reductions(rng, axis):
    w = rng.normal(size=(3, 4)).sum(axis=axis) if axis is not None else 1.0
    for name in ("sum", "mean", "max"):
        def f(x, name=name):
            out = ad.reduce(name, x, axis=axis)
            return (out * w).sum() if axis is not None else out
        assert grad_check(f, t(rng, 3, 4)) < TOL


def test_max_gradient_goes_to_first_argmax():
    x = Tensor(np.array([1.0, 3.0, 3.0]), requires_grad=True)
    x.max().backward()
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_reduce_over_empty_axis_raises():
    with pytest.raises(DimensionError):
        ad.reduce_sum(Tensor(np.zeros((0, 3))), axis=0)


def test_matmul_shapes_and_grads(rng):
    b = Tensor(rng.normal(size=(4, 2)))
    assert grad_check(lambda x: (x @ b).sum(), t(rng, 3, 4)) < TOL
    batched = Tensor(rng.normal(size=(2, 4, 3)))
    assert grad_check(lambda x: ad.matmul(x, batched).tanh().sum(), t(rng, 2, 3, 4)) < TOL
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_linear_softmax_layer_norm(rng):
    w = Tensor(rng.normal(size=(4, 3)))
    bias = Tensor(rng.normal(size=3))
    assert grad_check(lambda x: ad.linear(x, w, bias).tanh().sum(), t(rng, 2, 4)) < TOL
    target = Tensor(rng.normal(size=(2, 5)))
    mask = np.array([[True, True, False, True, True], [True, False, False, False, True]])
    assert grad_check(lambda x: (ad.softmax(x, mask) * target).sum(), t(rng, 2, 5)) < TOL
    gamma, beta = Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6))
    assert grad_check(lambda x: (ad.layer_norm(x, gamma, beta) * Tensor(rng.normal(size=(3, 6)))).sum(),
                      t(rng, 3, 6)) < TOL


def test_softmax_fully_masked_row_raises():
    with pytest.raises(ValueError, match="masked"):
        ad.softmax(Tensor(np.zeros((2, 3))), np.array([[True, True, True], [False, False, False]]))


def test_shape_ops_and_embedding(rng):
    w = Tensor(rng.normal(size=(3, 2)))
    assert grad_check(lambda x: (x.reshape(3, 2) * w).sum(), t(rng, 2, 3)) < TOL
    assert grad_check(lambda x: (x.T * w).sum(), t(rng, 2, 3)) < TOL
    assert grad_check(lambda x: (ad.concat([x, x * 2.0], axis=1)).tanh().sum(), t(rng, 2, 3)) < TOL
    assert grad_check(lambda x: x[1:].tanh().sum(), t(rng, 3, 2)) < TOL
    ids = np.array([[0, 2, 2], [1, 0, 2]])
    assert grad_check(lambda x: ad.embedding(x, ids).tanh().sum(), t(rng, 3, 4)) < TOL


def test_masked_mean_and_cosine(rng):
    mask = np.array([[True, True, False], [True, False, False]])
    assert grad_check(lambda x: ad.masked_mean(x, mask).tanh().sum(), t(rng, 2, 3, 4)) < TOL
    b = Tensor(rng.normal(size=(4, 5)))
    assert grad_check(lambda x: (ad.cosine_matrix(x, b) * 3.0).exp().sum(), t(rng, 3, 5)) < TOL


def test_cosine_zero_row_gives_zero_similarity():
    a = Tensor(np.array([[0.0, 0.0], [1.0, 0.0]]))
    s = ad.cosine_matrix(a, a).data
    assert s[0].tolist() == [0.0, 0.0]
    assert s[1, 1] == pytest.approx(1.0)


def test_gradients_accumulate_across_uses(rng):
    x = t(rng, 3)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_second_backward_without_zeroing_raises(rng):
    x = t(rng, 3)
    y = (x * 2.0).sum()
    y.backward()
    with pytest.raises(BackwardError):
        y.backward()
    x.zero_grad()
    y.backward()
    np.testing.assert_allclose(x.grad, 2.0)


def test_no_grad_builds_no_graph(rng):
    x = t(rng, 3)
    with ad.no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad
    assert ad.is_grad_enabled()


def test_grad_check_detects_wrong_gradient(rng):
    def bad(x):
        out = ad.exp(x)
        out._backward = lambda g: (g * 2.0,)
        return out.sum()
    assert grad_check(bad, t(rng, 4)) > 0.1


def test_grad_check_skips_relu_kink():
    x = Tensor(np.array([0.0, 1.0]))
    assert grad_check(lambda v: ad.relu(v).sum(), x) < TOL


@given(rows=st.integers(1, 4), cols=st.integers(1, 5), seed=st.integers(0, 10_000))
def test_composite_expression_grad_property(rows, cols, seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(cols, 3)))
    def f(x):
        h = ad.tanh(ad.linear(x, w))
        return ad.log(ad.exp(h).sum(axis=1) + 1.0).mean()
    assert grad_check(f, Tensor(rng.normal(size=(rows, cols)))) < TOL
