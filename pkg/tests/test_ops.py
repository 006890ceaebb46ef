import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drsn.errors import DimensionError
from drsn.ops import (
    ConvLayer,
    conv2d_backward,
    conv2d_forward,
    relu_backward,
    relu_forward,
    sigmoid_backward,
    sigmoid_forward,
)
from oracles import central_diff, conv2d_loops, max_rel


def layer_from(w, b):
    return ConvLayer(np.asarray(w, dtype=float), np.asarray(b, dtype=float))


def test_pointwise_affine(rng):
    x = rng.standard_normal((2, 1, 4, 3))
    y = conv2d_forward(x, layer_from(np.full((1, 1, 1, 1), 2.0), [1.0]))
    np.testing.assert_allclose(y, 2 * x + 1, rtol=0, atol=1e-15)


def test_zero_padding_counts():
    y = conv2d_forward(np.ones((1, 1, 5, 5)), layer_from(np.ones((1, 1, 3, 3)), [0.0]))
    assert y[0, 0, 2, 2] == 9
    assert y[0, 0, 0, 0] == 4
    assert y[0, 0, 0, 2] == 6


def test_matches_nested_loops(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    layer = layer_from(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3))
    np.testing.assert_allclose(conv2d_forward(x, layer), conv2d_loops(x, layer.weights, layer.bias),
                               rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("kernel", [(1, 1), (3, 3), (5, 5), (3, 5), (1, 3)])
def test_shape_preserved(rng, kernel):
    x = rng.standard_normal((2, 3, 7, 4))
    layer = ConvLayer.uniform(3, 4, *kernel, rng)
    assert conv2d_forward(x, layer).shape == (2, 4, 7, 4)


def test_even_kernel_rejected():
    with pytest.raises(DimensionError):
        ConvLayer.zeros(1, 1, 2, 3)


def test_channel_mismatch(rng):
    with pytest.raises(DimensionError):
        conv2d_forward(rng.standard_normal((1, 2, 4, 4)), ConvLayer.zeros(3, 1, 3, 3))


def test_backward_shape_mismatch(rng):
    layer = ConvLayer.uniform(2, 3, 3, 3, rng)
    with pytest.raises(DimensionError):
        conv2d_backward(rng.standard_normal((1, 2, 4, 4)), layer, np.zeros((1, 2, 4, 4)))


def test_backward_zero_dy(rng):
    layer = ConvLayer.uniform(2, 3, 3, 3, rng)
    x = rng.standard_normal((1, 2, 4, 4))
    dx = conv2d_backward(x, layer, np.zeros((1, 3, 4, 4)))
    assert not dx.any()
    assert not layer.grad_weights.any() and not layer.grad_bias.any()


def test_backward_scaling_adjoint(rng):
    dy = rng.standard_normal((2, 1, 3, 3))
    dx = conv2d_backward(np.zeros((2, 1, 3, 3)), layer_from(np.full((1, 1, 1, 1), 2.0), [0.0]), dy)
    np.testing.assert_array_equal(dx, 2 * dy)


def test_backward_finite_differences(rng):
    x = rng.standard_normal((1, 2, 6, 6))
    layer = layer_from(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3))
    r = rng.standard_normal((1, 3, 6, 6))

    def f():
        return float(np.sum(conv2d_forward(x, layer) * r))

    dx = conv2d_backward(x, layer, r)
    assert max_rel(dx, central_diff(f, x)) < 1e-4
    assert max_rel(layer.grad_weights, central_diff(f, layer.weights)) < 1e-4
    assert max_rel(layer.grad_bias, central_diff(f, layer.bias)) < 1e-4


def test_grad_bias_is_sum_of_dy(rng):
    layer = ConvLayer.uniform(2, 3, 3, 3, rng)
    dy = rng.standard_normal((2, 3, 4, 4))
    conv2d_backward(rng.standard_normal((2, 2, 4, 4)), layer, dy)
    np.testing.assert_allclose(layer.grad_bias, dy.sum(axis=(0, 2, 3)), rtol=1e-12)


def test_gradients_accumulate(rng):
    layer = ConvLayer.uniform(2, 2, 3, 3, rng)
    x = rng.standard_normal((1, 2, 4, 4))
    dy = rng.standard_normal((1, 2, 4, 4))
    conv2d_backward(x, layer, dy)
    once = layer.grad_weights.copy()
    conv2d_backward(x, layer, dy)
    np.testing.assert_allclose(layer.grad_weights, 2 * once, rtol=1e-12)
    layer.zero_grad()
    assert not layer.grad_weights.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 3, 5]), st.integers(1, 3), st.integers(1, 3))
def test_adjoint_identity(seed, k, cin, cout):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, cin, 6, 5))
    layer = ConvLayer(rng.standard_normal((cout, cin, k, k)), np.zeros(cout))
    dy = rng.standard_normal((2, cout, 6, 5))
    lhs = np.sum(conv2d_forward(x, layer) * dy)
    rhs = np.sum(x * conv2d_backward(x, layer, dy))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_linear_in_input(seed, a, b):
    rng = np.random.default_rng(seed)
    x1, x2 = rng.standard_normal((2, 1, 2, 5, 5))
    layer = ConvLayer(rng.standard_normal((2, 2, 3, 3)), np.zeros(2))
    lhs = conv2d_forward(a * x1 + b * x2, layer)
    rhs = a * conv2d_forward(x1, layer) + b * conv2d_forward(x2, layer)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10)


def test_uniform_init_bounds(rng):
    layer = ConvLayer.uniform(4, 8, 3, 3, rng)
    s = np.sqrt(6 / (4 * 9 + 8 * 9))
    assert np.abs(layer.weights).max() <= s
    assert np.abs(layer.weights).max() > 0.8 * s
    assert not layer.bias.any()


def test_relu():
    x = np.array([-1.0, 2.0]).reshape(1, 1, 1, 2)
    assert relu_forward(x).reshape(-1).tolist() == [0.0, 2.0]
    assert relu_backward(x, np.full_like(x, 5.0)).reshape(-1).tolist() == [0.0, 5.0]
    assert relu_backward(np.zeros((1, 1, 1, 1)), np.ones((1, 1, 1, 1))).item() == 0.0


def test_relu_idempotent(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    np.testing.assert_array_equal(relu_forward(relu_forward(x)), relu_forward(x))


def test_sigmoid_values():
    assert sigmoid_forward(np.zeros((1, 1, 1, 1))).item() == 0.5
    x = np.array([-1000.0, -40.0, -1.0, 0.0, 1.0, 40.0, 1000.0]).reshape(1, 1, 1, -1)
    y = sigmoid_forward(x)
    assert ((y > 0) & (y < 1)).all()
    assert np.all(np.diff(y.reshape(-1)) >= 0)
    y32 = sigmoid_forward(x.astype(np.float32))
    assert y32.dtype == np.float32 and ((y32 > 0) & (y32 < 1)).all()


@pytest.mark.parametrize("x0", [-2.0, 0.0, 3.0])
def test_sigmoid_backward_fd(x0):
    x = np.array([[[[x0]]]])
    analytic = sigmoid_backward(sigmoid_forward(x), np.ones_like(x)).item()
    numeric = central_diff(lambda: float(sigmoid_forward(x).item()), x).item()
    assert abs(analytic - numeric) <= 1e-6 * max(abs(analytic), 1e-6)
