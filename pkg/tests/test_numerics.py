import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pievit import numerics as nx
from pievit.errors import ContractError, DimensionError, NonFiniteError, ParameterError
from pievit.numerics import Tensor

from conftest import check_grads, leaf


def test_linear_loss_gradient_is_weight_vector(rng):
    w = rng.normal(size=5)
    x = Tensor(rng.normal(size=5), requires_grad=True)
    with nx.Tape() as tape:
        loss = nx.tsum(x * Tensor(w))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, w)


def test_elementwise_and_broadcast_gradients(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4)
    c = Tensor(rng.uniform(1, 2, (3, 1)), requires_grad=True)
    check_grads(lambda: nx.tsum((a + b) * c - a / c + nx.gelu(a * b)), [a, b, c])


def test_matmul_gradients_batched_and_flattened(rng):
    a, w = leaf(rng, 2, 3, 5), leaf(rng, 5, 4)
    b = leaf(rng, 2, 5, 3)
    check_grads(lambda: nx.tsum(nx.matmul(a, w)) + nx.tsum(nx.matmul(a, b)), [a, w, b])


def test_shape_op_gradients(rng):
    x = leaf(rng, 2, 3, 4)
    idx = np.array([2, 0, 2])
    target = Tensor(rng.normal(size=(3, 2, 4)))
    check_grads(lambda: nx.tsum(nx.transpose(x, (1, 0, 2)) * target)
                + nx.tsum(nx.gather(x, idx, axis=1))
                + nx.tsum(nx.concat([x[:, :1], x.reshape(2, 12)[:, None, :4]], axis=1))
                + nx.mean(nx.broadcast_to(x[:, :1, :], (2, 5, 4))), [x])


def test_softmax_layernorm_l2_gradients(rng):
    x = leaf(rng, 3, 6)
    g, b = leaf(rng, 6), leaf(rng, 6)
    t = Tensor(rng.dirichlet(np.ones(6), size=3))
    check_grads(lambda: nx.tsum(nx.softmax(x, 0.5) * t)
                + nx.tsum(nx.cross_entropy_rows(t, nx.log_softmax(x, 0.1)))
                + nx.tsum(nx.layer_norm(x, g, b) * t)
                + nx.tsum(nx.l2_normalize(x) * t), [x, g, b])


def test_where_routes_gradient(rng):
    a, b = leaf(rng, 4, 3), leaf(rng, 3)
    mask = np.array([True, False, True, False])[:, None]
    check_grads(lambda: nx.tsum(nx.where(mask, a, b) * a), [a, b])


def test_softmax_extremes():
    p = nx.softmax(Tensor(np.array([[1000.0, 0.0, -1000.0]]))).data
    np.testing.assert_allclose(p, [[1.0, 0.0, 0.0]])
    np.testing.assert_allclose(nx.softmax(Tensor(np.zeros((1, 5)))).data, 0.2)


def test_temperature_must_be_positive():
    with pytest.raises(ParameterError):
        nx.softmax(Tensor(np.zeros(3)), 0.0)


def test_layer_norm_of_standardised_row():
    out = nx.layer_norm(Tensor(np.array([1.0, -1.0])), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-12)
    np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-9)


def test_layer_norm_width_mismatch():
    with pytest.raises(DimensionError):
        nx.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


def test_matmul_mismatch_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_backward_contracts(rng):
    x = leaf(rng, 3)
    with nx.Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)
    with nx.Tape() as tape:
        z = nx.tsum(Tensor(np.ones(3)))
    with pytest.raises(ContractError):
        tape.backward(z)


def test_no_grad_records_nothing(rng):
    x = leaf(rng, 3)
    with nx.Tape() as tape:
        with nx.no_grad():
            y = nx.tsum(x * x)
    assert len(tape) == 0
    assert y.item() == pytest.approx(float(np.sum(x.data ** 2)))


def test_nonfinite_output_raises():
    with pytest.raises(NonFiniteError):
        nx.div(Tensor(np.ones(2)), Tensor(np.zeros(2)))
    with nx.finite_checks(False):
        out = nx.div(Tensor(np.ones(2)), Tensor(np.zeros(2)))
    assert np.isinf(out.data).all()


def test_gradients_accumulate_across_uses(rng):
    x = leaf(rng, 4)
    with nx.Tape() as tape:
        loss = nx.tsum(x) + nx.tsum(x * 3.0)
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 4.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 3), min_size=1, max_size=3), st.integers(0, 2**31 - 1))
def test_broadcast_add_gradient_shapes(shape, seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=shape), requires_grad=True)
    b = Tensor(rng.normal(size=shape[-1:]), requires_grad=True)
    with nx.Tape() as tape:
        loss = nx.tsum(a + b)
    tape.backward(loss)
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    np.testing.assert_allclose(b.grad, np.prod(shape[:-1]))
