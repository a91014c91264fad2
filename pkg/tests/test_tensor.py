import numpy as np
import pytest
import scipy.signal
import scipy.special
from hypothesis import given, strategies as st

from vilstm import tensor as T
from vilstm.errors import ConfigError, DimensionError, DomainError, GraphError
from vilstm.gradcheck import numerical_grad, relative_error
from vilstm.tensor import Tensor, count_macs, no_grad


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def grad_of(f, *xs):
    for x in xs:
        x.grad = None
    f().backward()
    return [x.grad for x in xs]


def fd_matches(f, x, tol=1e-6):
    (g,) = grad_of(f, x)
    return relative_error(g, numerical_grad(f, x)) < tol


def test_default_dtype_and_float_passthrough():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.zeros(3)).dtype == np.float64
    assert Tensor(np.arange(3)).dtype == np.float32


def test_arithmetic_forward(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    ta, tb = Tensor(a), Tensor(b)
    np.testing.assert_allclose((ta + tb).data, a + b)
    np.testing.assert_allclose((ta - tb).data, a - b)
    np.testing.assert_allclose((ta * tb).data, a * b)
    np.testing.assert_allclose((ta / tb).data, a / b)
    np.testing.assert_allclose((2.0 - ta).data, 2.0 - a)
    np.testing.assert_allclose((-ta).data, -a)


def test_only_scalar_broadcasting():
    with pytest.raises(DimensionError):
        Tensor(np.ones((3, 4))) + Tensor(np.ones(4))
    out = Tensor(np.ones((3, 4))) + Tensor(np.float64(2.0))
    assert out.shape == (3, 4)


def test_scalar_operand_gradient_is_summed():
    x = leaf(np.ones((2, 3)))
    s = leaf(3.0)
    (gx, gs) = grad_of(lambda: (x * s).sum(), x, s)
    np.testing.assert_allclose(gs, 6.0)
    np.testing.assert_allclose(gx, np.full((2, 3), 3.0))


def test_activations_against_scipy(rng):
    v = rng.normal(scale=4, size=50)
    x = Tensor(v)
    np.testing.assert_allclose(x.sigmoid().data, scipy.special.expit(v), rtol=1e-12)
    np.testing.assert_allclose(x.logsigmoid().data, scipy.special.log_expit(v), rtol=1e-12)
    np.testing.assert_allclose(x.silu().data, v * scipy.special.expit(v), rtol=1e-12)
    lp = T.log_softmax(Tensor(v.reshape(5, 10))).data
    np.testing.assert_allclose(lp, scipy.special.log_softmax(v.reshape(5, 10), axis=-1), rtol=1e-12)


def test_sigmoid_extremes_are_finite():
    x = Tensor(np.array([-1000.0, 1000.0], dtype=np.float32))
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        s = x.sigmoid().data
        ls = x.logsigmoid().data
    assert np.all(np.isfinite(s)) and np.all(np.isfinite(ls))
    assert s[0] == 0 and s[1] == 1


def test_log_domain():
    with pytest.raises(DomainError):
        T.log(Tensor(np.array([1.0, 0.0])))


def test_maximum_tie_goes_to_first():
    a, b = leaf([1.0, 2.0]), leaf([1.0, 3.0])
    ga, gb = grad_of(lambda: T.maximum(a, b).sum(), a, b)
    np.testing.assert_array_equal(ga, [1.0, 0.0])
    np.testing.assert_array_equal(gb, [0.0, 1.0])


@pytest.mark.parametrize("op", ["exp", "sigmoid", "logsigmoid", "silu", "negate"])
def test_unary_gradients(op, rng):
    x = leaf(rng.normal(size=(3, 5)))
    assert fd_matches(lambda: (T.elementwise(op, x) * Tensor(np.arange(15.0).reshape(3, 5))).sum(), x)


def test_log_and_div_gradients(rng):
    x = leaf(rng.uniform(0.5, 2.0, size=(4, 3)))
    y = leaf(rng.uniform(0.5, 2.0, size=(4, 3)))
    assert fd_matches(lambda: (x.log() * y).sum(), x)
    assert fd_matches(lambda: (x / y).sum(), y)


def test_unknown_elementwise_op():
    with pytest.raises(ConfigError):
        T.elementwise("tanh", Tensor(np.ones(2)))


def test_matmul_shapes_and_errors(rng):
    a = Tensor(rng.normal(size=(2, 3, 4, 5)))
    assert (a @ Tensor(rng.normal(size=(5, 6)))).shape == (2, 3, 4, 6)
    assert (a @ Tensor(rng.normal(size=(2, 3, 5, 6)))).shape == (2, 3, 4, 6)
    with pytest.raises(DimensionError):
        a @ Tensor(rng.normal(size=(3, 5, 6)))
    with pytest.raises(DimensionError):
        a @ Tensor(rng.normal(size=(4, 6)))


def test_matmul_gradient_closed_form(rng):
    A, B = rng.normal(size=(2, 4, 3)), rng.normal(size=(3, 5))
    G = rng.normal(size=(2, 4, 5))
    a, b = leaf(A), leaf(B)
    ga, gb = grad_of(lambda: (a @ b * Tensor(G)).sum(), a, b)
    np.testing.assert_allclose(ga, G @ B.T)
    np.testing.assert_allclose(gb, np.einsum("bik,bin->kn", A, G))


def test_layernorm_forward_and_grad(rng):
    X = rng.normal(size=(3, 4, 6))
    x, g, b = leaf(X), leaf(rng.normal(size=6)), leaf(rng.normal(size=6))
    y = T.layernorm(x, g, b, 1e-6).data
    ref = (X - X.mean(-1, keepdims=True)) / np.sqrt(X.var(-1, keepdims=True) + 1e-6) * g.data + b.data
    np.testing.assert_allclose(y, ref, rtol=1e-10)
    W = Tensor(rng.normal(size=X.shape))
    for t in (x, g, b):
        assert fd_matches(lambda: (T.layernorm(x, g, b) * W).sum(), t)


def test_conv2d_against_scipy(rng):
    X = rng.normal(size=(2, 5, 4, 3))
    K = rng.normal(size=(3, 3, 3))
    out = T.conv2d_depthwise(Tensor(X), Tensor(K), Tensor(np.arange(3.0))).data
    for n in range(2):
        for c in range(3):
            ref = scipy.signal.correlate2d(X[n, :, :, c], K[:, :, c], mode="same") + c
            np.testing.assert_allclose(out[n, :, :, c], ref, rtol=1e-12)


def test_conv2d_rejects_other_kernels():
    with pytest.raises(ConfigError):
        T.conv2d_depthwise(Tensor(np.ones((4, 4, 2))), Tensor(np.ones((5, 5, 2))))


def test_causal_conv1d_against_scipy(rng):
    X = rng.normal(size=(7, 3))
    K = rng.normal(size=(4, 3))
    out = T.causal_conv1d(Tensor(X), Tensor(K)).data
    for c in range(3):
        # tap K-1 multiplies the current step
        ref = scipy.signal.lfilter(K[::-1, c], [1.0], X[:, c])
        np.testing.assert_allclose(out[:, c], ref, rtol=1e-12)


def test_conv_gradients(rng):
    x, k, b = leaf(rng.normal(size=(2, 3, 4, 2))), leaf(rng.normal(size=(3, 3, 2))), leaf(rng.normal(size=2))
    W = Tensor(rng.normal(size=(2, 3, 4, 2)))
    for t in (x, k, b):
        assert fd_matches(lambda: (T.conv2d_depthwise(x, k, b) * W).sum(), t)
    x1, k1 = leaf(rng.normal(size=(2, 6, 3))), leaf(rng.normal(size=(4, 3)))
    W1 = Tensor(rng.normal(size=(2, 6, 3)))
    for t in (x1, k1):
        assert fd_matches(lambda: (T.causal_conv1d(x1, k1) * W1).sum(), t)


def test_causal_conv1d_is_causal(rng):
    X = rng.normal(size=(8, 2))
    K = Tensor(rng.normal(size=(4, 2)))
    base = T.causal_conv1d(Tensor(X), K).data
    X2 = X.copy()
    X2[5:] += 10.0
    np.testing.assert_array_equal(T.causal_conv1d(Tensor(X2), K).data[:5], base[:5])


def test_indexing_take_scatter_gradients(rng):
    x = leaf(rng.normal(size=(5, 4)))
    W = Tensor(rng.normal(size=(3, 4)))
    assert fd_matches(lambda: (x[1:4] * W).sum(), x)
    idx = np.array([4, 0, 4])
    assert fd_matches(lambda: (T.take(x, idx, 0) * W).sum(), x)
    v = leaf(rng.normal(size=(2, 4)))
    s = T.scatter_rows(v, [3, 1], 5)
    np.testing.assert_array_equal(s.data[[0, 2, 4]], 0)
    np.testing.assert_array_equal(s.data[[3, 1]], v.data)
    W5 = Tensor(rng.normal(size=(5, 4)))
    assert fd_matches(lambda: (T.scatter_rows(v, [3, 1], 5) * W5).sum(), v)


def test_shape_op_gradients(rng):
    x = leaf(rng.normal(size=(2, 3, 4)))
    W = Tensor(rng.normal(size=(4, 3, 2)))
    assert fd_matches(lambda: (x.transpose(2, 1, 0) * W).sum(), x)
    assert fd_matches(lambda: (x.reshape(4, 3, 2) * W).sum(), x)
    assert fd_matches(lambda: (x.flip(1).cumsum(2) * Tensor(np.arange(24.0).reshape(2, 3, 4))).sum(), x)
    y = leaf(rng.normal(size=(1, 3, 1)))
    Wb = Tensor(rng.normal(size=(5, 2, 3, 4)))
    assert fd_matches(lambda: (y.broadcast_to((5, 2, 3, 4)) * Wb).sum(), y)
    a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(2, 5)))
    assert fd_matches(lambda: (T.concat([a, b], 1) * Tensor(np.arange(16.0).reshape(2, 8))).sum(), b)
    assert fd_matches(lambda: (T.stack([a, a * 2.0], 1) * Tensor(np.arange(12.0).reshape(2, 2, 3))).sum(), a)


def test_cross_entropy_value(rng):
    logits = rng.normal(size=(4, 6))
    labels = np.array([0, 5, 2, 2])
    ref = -np.mean(scipy.special.log_softmax(logits, -1)[np.arange(4), labels])
    assert T.cross_entropy(Tensor(logits), labels).item() == pytest.approx(ref, rel=1e-12)
    x = leaf(logits)
    assert fd_matches(lambda: T.cross_entropy(x, labels), x)


def test_backward_twice_is_an_error():
    x = leaf([1.0, 2.0])
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_backward_needs_scalar_and_grad():
    with pytest.raises(GraphError):
        (leaf([1.0, 2.0]) * 2.0).backward()
    with pytest.raises(GraphError):
        Tensor(np.ones(1)).sum().backward()


def test_grad_accumulates_on_leaves_only():
    x = leaf([1.0, 2.0])
    h = x * 3.0
    (h * h).sum().backward()
    np.testing.assert_allclose(x.grad, 18 * x.data)
    assert h.grad is None


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_deep_chain_does_not_recurse():
    x = leaf(np.ones(2))
    y = x
    for _ in range(5000):
        y = y + 1e-3
    y.sum().backward()
    np.testing.assert_allclose(x.grad, 1.0)


def test_mac_counter(rng):
    a, b = Tensor(rng.normal(size=(3, 4, 5))), Tensor(rng.normal(size=(5, 6)))
    with count_macs() as outer:
        a @ b
        with count_macs() as inner:
            T.conv2d_depthwise(Tensor(np.ones((2, 2, 7))), Tensor(np.ones((3, 3, 7))))
    assert inner.total == 2 * 2 * 7 * 9
    assert outer.by_op["matmul"] == 3 * 4 * 6 * 5
    assert outer.total == 3 * 4 * 6 * 5 + 2 * 2 * 7 * 9


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12))
def test_sum_mean_gradients_are_uniform(vals):
    x = leaf(vals)
    x.mean().backward()
    np.testing.assert_allclose(x.grad, np.full(len(vals), 1.0 / len(vals)))


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10 ** 6))
def test_matmul_matches_numpy(m, k, n, seed):
    r = np.random.default_rng(seed)
    A, B = r.normal(size=(m, k)), r.normal(size=(k, n))
    np.testing.assert_allclose((Tensor(A) @ Tensor(B)).data, A @ B)
