import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from evfusion import tensor as T
from evfusion.tensor import GraphError, ShapeError, Tensor, finite_diff_check


def t64(rng, *shape, scale=1.0):
    return Tensor((rng.standard_normal(shape) * scale).astype(np.float64))


def naive_conv(x, w, b):
    """Direct nested-loop cross-correlation with zero padding."""
    n, c, h, wd = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, cout, h, wd))
    for i in range(h):
        for j in range(wd):
            patch = xp[:, :, i : i + 3, j : j + 3]
            out[:, :, i, j] = np.einsum("ncyx,ocyx->no", patch, w)
    return out + b[None, :, None, None]


def test_conv2d_matches_direct_loop(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, naive_conv(x, w, b), rtol=1e-12, atol=1e-12)


def test_conv2d_unbatched_and_shape_errors(rng):
    x = rng.standard_normal((3, 4, 4))
    w = rng.standard_normal((2, 3, 3, 3))
    assert T.conv2d(Tensor(x), Tensor(w)).shape == (2, 4, 4)
    with pytest.raises(ShapeError, match="input channels"):
        T.conv2d(Tensor(x), Tensor(rng.standard_normal((2, 5, 3, 3))))
    with pytest.raises(ShapeError, match="kernel size"):
        T.conv2d(Tensor(x), Tensor(rng.standard_normal((2, 3, 5, 5))))
    with pytest.raises(ShapeError, match="bias"):
        T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))


def test_maxpool_values_and_first_occurrence_ties():
    x = Tensor(np.array([[[[1.0, 1.0], [1.0, 1.0]]]]), requires_grad=True)
    out = T.maxpool2(x)
    assert out.data.item() == 1.0
    T.backward(T.tsum(out))
    # only the top-left member of a tied block receives the gradient
    np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])


def test_maxpool_rejects_odd_size():
    with pytest.raises(ShapeError):
        T.maxpool2(Tensor(np.zeros((1, 3, 3))))


def test_relu_gradient_at_zero_is_zero():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    T.backward(T.tsum(T.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_mse_hand_value_and_gradient():
    pred = Tensor(np.array([[2.0, 0.0, 0.0]]), requires_grad=True)
    loss = T.mse(pred, np.zeros((1, 3)))
    assert loss.item() == pytest.approx(4.0 / 3.0)
    T.backward(loss)
    np.testing.assert_allclose(pred.grad, [[4.0 / 3.0, 0.0, 0.0]])
    assert T.mse(Tensor(np.ones((2, 3))), np.ones((2, 3))).item() == 0.0
    with pytest.raises(ShapeError):
        T.mse(Tensor(np.ones((2, 3))), np.ones((3, 2)))


def test_softmax_rows_sum_to_one_and_are_shift_invariant(rng):
    x = rng.standard_normal((4, 7)) * 50
    s = T.softmax_rows(Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0)
    np.testing.assert_allclose(T.softmax_rows(Tensor(x + 1000.0)).data, s, atol=1e-12)


def test_attention_matches_closed_form(rng):
    x = rng.standard_normal((2, 5, 4))
    wq, wk, wv = (rng.standard_normal((4, 4)) for _ in range(3))
    out = T.self_attention(*(Tensor(a) for a in (x, wq, wk, wv))).data
    q, k, v = x @ wq, x @ wk, x @ wv
    s = q @ k.transpose(0, 2, 1) / 2.0
    a = np.exp(s - s.max(-1, keepdims=True))
    a /= a.sum(-1, keepdims=True)
    np.testing.assert_allclose(out, a @ v, rtol=1e-12)


def test_dropout_eval_identity_and_train_scaling(rng):
    x = Tensor(np.ones((200, 50)))
    assert T.dropout(x, 0.3, "eval") is x
    y = T.dropout(x, 0.5, "train", rng=0).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05
    with pytest.raises(ValueError):
        T.dropout(x, 1.0)
    with pytest.raises(ValueError):
        T.dropout(x, 0.1, mode="bogus")


def test_dropout_same_seed_same_mask():
    x = Tensor(np.ones((10, 10)))
    np.testing.assert_array_equal(T.dropout(x, 0.4, rng=5).data, T.dropout(x, 0.4, rng=5).data)


def test_second_backward_raises():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = T.tsum(T.mul(x, x))
    T.backward(loss)
    with pytest.raises(GraphError):
        T.backward(loss)


def test_backward_needs_scalar_and_grad_path():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError, match="scalar"):
        T.backward(T.mul(x, 2.0))
    with pytest.raises(GraphError):
        T.backward(T.tsum(Tensor(np.ones(3))))


def test_leaf_gradients_accumulate_until_zeroed():
    x = Tensor(np.array([3.0]), requires_grad=True)
    for _ in range(2):
        T.backward(T.tsum(T.mul(x, 2.0)))
    np.testing.assert_array_equal(x.grad, [4.0])
    x.zero_grad()
    T.backward(T.tsum(T.mul(x, 2.0)))
    np.testing.assert_array_equal(x.grad, [2.0])


def test_shared_subexpression_gradients_sum():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = T.mul(x, x)
    T.backward(T.tsum(T.add(y, y)))  # d(2x^2)/dx = 4x
    np.testing.assert_allclose(x.grad, [8.0])


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, 3.0)
    assert y.node is None and not y.requires_grad


def test_matmul_shape_error():
    with pytest.raises(ShapeError, match="inner"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_concat_channels_checks_spatial_size():
    with pytest.raises(ShapeError):
        T.concat_channels(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 2, 5, 5))))


# --------------------------------------------------------------------------
# gradient checks in float64


@pytest.mark.parametrize(
    "name",
    ["add", "mul", "matmul", "relu", "conv2d", "maxpool2", "linear", "softmax", "attention", "mse",
     "reshape_transpose", "concat", "dropout", "mean"],
)
def test_op_gradients_match_finite_differences(name, rng):
    a = t64(rng, 2, 3, 4, 4)
    w = t64(rng, 5, 3, 3, 3, scale=0.3)
    b = t64(rng, 5)
    m1, m2 = t64(rng, 3, 4), t64(rng, 4, 2)
    tokens = t64(rng, 2, 6, 4)
    wq, wk, wv = (t64(rng, 4, 4, scale=0.5) for _ in range(3))
    lw = t64(rng, 5, 4)
    target = rng.standard_normal((2, 5, 4, 4))
    cases = {
        "add": (lambda: T.tsum(T.mul(T.add(m1, t64(np.random.default_rng(0), 4)), m1)), [m1]),
        "mul": (lambda: T.tsum(T.mul(m1, T.mul(m1, m1))), [m1]),
        "matmul": (lambda: T.tsum(T.mul(T.matmul(m1, m2), T.matmul(m1, m2))), [m1, m2]),
        "relu": (lambda: T.tsum(T.mul(T.relu(m1), m1)), [m1]),
        "conv2d": (lambda: T.mse(T.conv2d(a, w, b), target), [a, w, b]),
        "maxpool2": (lambda: T.tsum(T.mul(T.maxpool2(a), T.maxpool2(a))), [a]),
        "linear": (lambda: T.tsum(T.mul(T.linear(m1, lw, b), T.linear(m1, lw, b))), [m1, lw, b]),
        "softmax": (lambda: T.tsum(T.mul(T.softmax_rows(m1), m1)), [m1]),
        "attention": (lambda: T.tsum(T.mul(T.self_attention(tokens, wq, wk, wv), tokens)), [tokens, wq, wk, wv]),
        "mse": (lambda: T.mse(m1, np.ones((3, 4))), [m1]),
        "reshape_transpose": (lambda: T.tsum(T.mul(T.transpose(T.reshape(m1, (4, 3)), (1, 0)), m1)), [m1]),
        "concat": (lambda: T.tsum(T.mul(T.concat([m1, m1], axis=0), T.concat([m1, m1], axis=0))), [m1]),
        "dropout": (lambda: T.tsum(T.mul(T.dropout(m1, 0.3, "train", rng=3), m1)), [m1]),
        "mean": (lambda: T.mean(T.mul(m1, m1)), [m1]),
    }
    f, params = cases[name]
    assert finite_diff_check(f, params, eps=1e-3, n_samples=10, rng=0) < 1e-3


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
    arrays(np.float64, (4,), elements=st.floats(-3, 3)),
)
def test_broadcast_add_mul_gradients(a, b):
    ta, tb = Tensor(a.copy(), requires_grad=True), Tensor(b.copy(), requires_grad=True)
    T.backward(T.tsum(T.mul(T.add(ta, tb), tb)))
    np.testing.assert_allclose(ta.grad, np.broadcast_to(b, (3, 4)))
    np.testing.assert_allclose(tb.grad, (a + 2 * b).sum(axis=0), rtol=1e-10, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 2, 4, 4), elements=st.floats(-5, 5)))
def test_maxpool_gradient_is_a_routing(x):
    """Each pooled gradient lands on exactly one input of its block, and it is a block maximum."""
    t = Tensor(x.copy(), requires_grad=True)
    out = T.maxpool2(t)
    T.backward(T.tsum(out))
    g = t.grad
    blocks = g.reshape(2, 2, 2, 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(2, 2, 2, 2, 4)
    np.testing.assert_array_equal(blocks.sum(-1), 1.0)
    vals = x.reshape(2, 2, 2, 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(2, 2, 2, 2, 4)
    np.testing.assert_array_equal((vals * blocks).sum(-1), out.data)


def test_float32_by_default_and_float64_preserved():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64
