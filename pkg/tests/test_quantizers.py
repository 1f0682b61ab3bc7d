import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from evfusion import tensor as T
from evfusion.quant import quantizers as Q
from evfusion.quant.bitpack import unpack
from evfusion.tensor import Tensor, finite_diff_check


def scalar(v):
    return Tensor(np.array([v], np.float64), requires_grad=True)


# --------------------------------------------------------------------------
# LSQ+


def test_lsq_zero_code_and_saturation():
    s, beta = scalar(0.37), scalar(1.5)
    assert Q.lsq_quantize(Tensor(np.array([1.5])), s, beta, 4).data[0] == pytest.approx(1.5)
    out = Q.lsq_quantize(Tensor(np.array([10.0])), scalar(1.0), scalar(0.0), 2, signed=True)
    assert out.data[0] == 1.0
    assert Q.grid_bounds(2, True) == (-2, 1)
    assert Q.grid_bounds(8, False) == (0, 255)


def test_lsq_rejects_bad_scale_and_bits():
    with pytest.raises(ValueError):
        Q.lsq_quantize(Tensor(np.ones(2)), scalar(0.0), scalar(0.0), 4)
    with pytest.raises(ValueError):
        Q.grid_bounds(9, True)
    with pytest.raises(ValueError):
        Q.grid_bounds(1, True)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, 40, elements=st.floats(-20, 20)),
    st.floats(0.01, 3.0),
    st.floats(-2.0, 2.0),
    st.integers(2, 8),
    st.booleans(),
)
def test_lsq_outputs_on_grid(x, s, beta, bits, signed):
    out = Q.lsq_quantize(Tensor(x), scalar(s), scalar(beta), bits, signed).data
    k = (out - beta) / s
    qn, qp = Q.grid_bounds(bits, signed)
    np.testing.assert_allclose(k, np.round(k), atol=1e-5)
    assert k.min() >= qn - 1e-5 and k.max() <= qp + 1e-5


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 30, elements=st.floats(-10, 10)), st.integers(2, 8))
def test_quantizers_are_monotone(x, bits):
    xs = np.sort(x)
    lsq = Q.lsq_quantize(Tensor(xs), scalar(0.3), scalar(-0.1), bits).data
    assert np.all(np.diff(lsq) >= 0)
    assert np.all(np.diff(Q.sign(xs)) >= 0)
    a = Tensor(np.zeros(1))
    assert np.all(np.diff(Q.reactnet_rsign(Tensor(xs[None]), a, axis=0).data[0]) >= 0)


def test_lsq_straight_through_inside_range():
    x = Tensor(np.array([0.1, 0.49, -0.7]), requires_grad=True)
    T.backward(T.tsum(Q.lsq_quantize(x, scalar(0.25), scalar(0.0), 4)))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])
    x = Tensor(np.array([100.0]), requires_grad=True)
    T.backward(T.tsum(Q.lsq_quantize(x, scalar(0.25), scalar(0.0), 4)))
    assert x.grad[0] == 0.0


def test_lsq_step_gradient_matches_hand_formula():
    # one element, 4-bit signed, v = 0.9/0.25 = 3.6 -> q = 4; d/ds = q - v, scaled 1/sqrt(1*7)
    s = scalar(0.25)
    T.backward(T.tsum(Q.lsq_quantize(Tensor(np.array([0.9])), s, scalar(0.0), 4)))
    assert s.grad[0] == pytest.approx((4 - 3.6) / np.sqrt(7))


def test_lsq_codes_match_quantized_values(rng):
    x = rng.standard_normal(50)
    s, b = np.array([0.2]), np.array([0.1])
    codes = Q.lsq_codes(x, s, b, 4, True)
    out = Q.lsq_quantize(Tensor(x), Tensor(s), Tensor(b), 4).data
    np.testing.assert_allclose(codes * 0.2 + 0.1, out, atol=1e-12)


# --------------------------------------------------------------------------
# binary weights


def test_dorefa_examples():
    packed, scale = Q.dorefa_binarize_weights(np.full(8, 0.5))
    assert scale == 0.5 and np.all(unpack(packed) == 1)
    packed, scale = Q.dorefa_binarize_weights(np.array([-2.0, 2.0]))
    assert scale == 2.0
    assert packed.words[0, 0] == 0b10


def test_dorefa_matches_sign_mean_oracle(rng):
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    packed, scale = Q.dorefa_binarize_weights(w)
    np.testing.assert_array_equal(unpack(packed) * scale, np.where(w >= 0, 1, -1) * np.float32(np.abs(w).mean()))


def test_ste_sign_gradient_masked_at_clip():
    w = Tensor(np.array([0.5, -1.0, 1.5]), requires_grad=True)
    T.backward(T.tsum(Q.ste_sign(w)))
    np.testing.assert_array_equal(w.grad, [1.0, 1.0, 0.0])


def test_dorefa_stochastic_gradient_levels(rng):
    g = rng.standard_normal(1000)
    q = Q.dorefa_quantize_grad(g, 2, np.random.default_rng(0))
    m = np.abs(g).max()
    levels = np.unique(np.round((q / (2 * m) + 0.5) * 3, 9))
    assert set(levels) <= {0.0, 1.0, 2.0, 3.0}
    # stochastic rounding is unbiased in expectation
    qs = np.mean([Q.dorefa_quantize_grad(g, 2, np.random.default_rng(i)) for i in range(300)], axis=0)
    assert np.abs(qs - g).mean() < 0.1 * m


def test_irnet_scale_is_power_of_two(rng):
    for seed in range(50):
        w = np.random.default_rng(seed).standard_normal(30) * np.random.default_rng(seed).uniform(0.01, 10)
        for std in (True, False):
            _, scale = Q.irnet_binarize_weights(w, std)
            assert np.log2(scale) == np.round(np.log2(scale))


def test_irnet_examples():
    _, scale = Q.irnet_binarize_weights(np.array([1.0, -1.0, 1.0, -1.0]), standardize=False)
    assert scale == 1.0
    c = np.array([0.3, -0.3, 0.3, 0.3, -0.3, -0.3])
    a, _ = Q.irnet_binarize_weights(c, True)
    b, _ = Q.irnet_binarize_weights(c, False)
    np.testing.assert_array_equal(a.words, b.words)
    with pytest.raises(ValueError, match="std"):
        Q.irnet_binarize_weights(np.ones(5), True)


def test_ede_schedule_endpoints():
    k0, t0 = Q.ede_params(0.0)
    k1, t1 = Q.ede_params(1.0)
    assert (k0, t0) == pytest.approx((10.0, 0.1))
    assert (k1, t1) == pytest.approx((1.0, 10.0))


def test_ede_gradient_formula():
    x = Tensor(np.array([0.0, 0.5]), requires_grad=True)
    T.backward(T.tsum(Q.ede_sign(x, 1.0)))
    np.testing.assert_allclose(x.grad, 10.0 * (1 - np.tanh(10.0 * np.array([0.0, 0.5])) ** 2))


# --------------------------------------------------------------------------
# ReActNet


def test_rsign_with_zero_shift_is_sign(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    out = Q.reactnet_rsign(Tensor(x), Tensor(np.zeros(3))).data
    np.testing.assert_array_equal(out, np.where(x >= 0, 1.0, -1.0))


def test_rsign_surrogate_gradient():
    x = Tensor(np.array([[0.0], [0.5], [2.0]]), requires_grad=True)
    T.backward(T.tsum(Q.reactnet_rsign(x, Tensor(np.zeros(1)), axis=1)))
    np.testing.assert_allclose(x.grad[:, 0], [2.0, 1.0, 0.0])


def test_rprelu_continuity_and_affine_case(rng):
    g, b = np.array([0.3]), np.array([-0.2])
    at_gamma = Q.reactnet_rprelu(Tensor(np.array([[0.3]])), Tensor(g), Tensor(np.array([0.25])), Tensor(b), axis=1)
    assert at_gamma.data[0, 0] == pytest.approx(-0.2)
    x = rng.standard_normal((5, 1))
    out = Q.reactnet_rprelu(Tensor(x), Tensor(g), Tensor(np.array([1.0])), Tensor(b), axis=1).data
    np.testing.assert_allclose(out, x - 0.3 - 0.2)


def test_rprelu_gradients(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    params = [Tensor(rng.standard_normal(3) * 0.1) for _ in range(3)]
    f = lambda: T.tsum(T.mul(Q.reactnet_rprelu(x, *params), x))  # noqa: E731
    assert finite_diff_check(f, [x] + params, eps=1e-5, rng=1) < 1e-4


def test_distributional_loss(rng):
    s = Tensor(rng.standard_normal((4, 3)))
    assert Q.distributional_loss(s, s.data.copy()).item() == 0.0
    teacher = rng.standard_normal((4, 3))
    assert finite_diff_check(lambda: Q.distributional_loss(s, teacher), s, eps=1e-3) < 1e-4
    with pytest.raises(ValueError):
        Q.distributional_loss(s, np.zeros((3, 4)))
