import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retrieval_lab import autograd as ag
from retrieval_lab.autograd import Tensor, grad_check, layer_norm, mse_loss, softmax_rows


def rand(shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).normal(scale=scale, size=shape)


def _sq(t):
    return (t * t).sum()


# -- mse ---------------------------------------------------------------------------


def test_mse_identity_and_unit():
    x = Tensor(np.ones((2, 3)))
    assert mse_loss(x, x.data).item() == 0.0
    assert mse_loss(Tensor(np.array([1.0, 1.0])), np.zeros(2)).item() == pytest.approx(1.0)


def test_mse_matches_scalar_loop():
    p, t = rand((5, 7), 1), rand((5, 7), 2)
    total = 0.0
    for a, b in zip(p.ravel(), t.ravel()):
        total += (float(a) - float(b)) ** 2
    with ag.precision(np.float64):
        assert mse_loss(Tensor(p), t).item() == pytest.approx(total / p.size, abs=1e-6)


def test_mse_shape_mismatch():
    with pytest.raises(ValueError):
        mse_loss(Tensor(np.zeros((2, 3))), np.zeros((3, 2)))


def test_mse_grad():
    t = rand((3, 4), 5)
    assert grad_check(lambda x: mse_loss(x, t), rand((3, 4), 6)) < 1e-6


# -- layer norm --------------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor(np.full((2, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    assert np.all(out.data == 0.0)


def test_layer_norm_standardizes():
    out = layer_norm(Tensor(rand((4, 16), 3, scale=5.0)), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.allclose(out.mean(-1), 0.0, atol=1e-4)
    assert np.allclose(out.var(-1), 1.0, atol=1e-4)


def test_layer_norm_zero_length_rows():
    with pytest.raises(ValueError):
        layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.ones(0)), Tensor(np.zeros(0)))


def test_layer_norm_grads():
    g, b = rand(6, 1), rand(6, 2)
    x = rand((3, 6), 3)
    assert grad_check(lambda t: (layer_norm(t, Tensor(g), Tensor(b)) * Tensor(rand((3, 6), 4))).sum(), x) < 1e-4
    assert grad_check(lambda t: _sq(layer_norm(Tensor(x), t, Tensor(b))), g) < 1e-4
    assert grad_check(lambda t: _sq(layer_norm(Tensor(x), Tensor(g), t)), b) < 1e-4


# -- softmax -----------------------------------------------------------------------


def test_softmax_symmetric_and_masked():
    assert np.allclose(softmax_rows(Tensor(np.zeros((1, 2)))).data, [[0.5, 0.5]])
    out = softmax_rows(Tensor(np.array([[3.0, 7.0]])), np.array([[True, False]])).data
    assert out[0, 0] == 1.0 and out[0, 1] == 0.0


def test_softmax_fully_masked_row():
    with pytest.raises(ValueError):
        softmax_rows(Tensor(np.zeros((2, 2))), np.array([[True, False], [False, False]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.floats(0.1, 50.0))
def test_softmax_rows_are_distributions(seed, n, scale):
    x = rand((n, n), seed, scale)
    mask = np.tril(np.ones((n, n), bool))
    out = softmax_rows(Tensor(x), mask).data
    assert np.allclose(out.sum(-1), 1.0, atol=1e-6)
    assert np.all(out[~mask] == 0.0)


def test_softmax_grad():
    mask = np.tril(np.ones((4, 4), bool))
    w = rand((4, 4), 9)
    assert grad_check(lambda t: (softmax_rows(t, mask) * Tensor(w)).sum(), rand((4, 4), 8)) < 1e-4


# -- primitives --------------------------------------------------------------------


PRIMITIVES = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "matmul": lambda a, b: a @ b.transpose(1, 0),
    "gelu": lambda a, b: ag.gelu(a) * b,
    "reshape": lambda a, b: a.reshape(12) * b.reshape(12),
    "getitem": lambda a, b: a[1:, ::2] * b[1:, ::2],
    "mean": lambda a, b: a.mean(axis=0) * b.sum(axis=0),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 1000))
def test_primitive_backward_matches_finite_differences(name, seed):
    op = PRIMITIVES[name]
    b = rand((3, 4), seed + 1)
    assert grad_check(lambda a: op(a, Tensor(b)).sum(), rand((3, 4), seed)) < 1e-4


def test_broadcast_add_grad():
    bias = rand(4, 1)
    x = rand((3, 4), 2)
    assert grad_check(lambda t: _sq(Tensor(x) + t), bias) < 1e-6


def test_grad_check_quadratic_and_constant():
    assert grad_check(lambda t: (t * t).sum(), rand(5, 0)) < 1e-6
    x = Tensor(rand(3, 1), requires_grad=True)
    (x * 0.0).sum().backward()
    assert np.all(x.grad == 0.0)


def test_grad_accumulates_over_shared_nodes():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x
    y.sum().backward()
    assert x.grad[0] == pytest.approx(5.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_forward_raises():
    with pytest.raises(ag.NonFiniteError):
        _ = Tensor(np.array([1e30], dtype=np.float32)) * Tensor(np.array([1e30], dtype=np.float32))


def test_no_grad_builds_no_graph():
    x = Tensor(rand(3), requires_grad=True)
    with ag.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_forward_finite_for_bounded_inputs():
    x = Tensor(np.random.default_rng(0).uniform(-10, 10, size=(4, 8)))
    mask = np.tril(np.ones((4, 4), bool))
    out = softmax_rows(x @ x.transpose(1, 0), mask)
    out = layer_norm(ag.gelu(out @ x), Tensor(np.ones(8)), Tensor(np.zeros(8)))
    assert np.isfinite(out.data).all()
