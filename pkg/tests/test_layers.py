"""Layer forward/backward behavior against direct definitions."""

import numpy as np
import pytest

from heatbench.netcore import (Conv2D, Flatten, Linear, MaxPool2D, ReLU,
                               conv_backward_input, conv_forward)


def test_relu_rectifies():
    y, _ = ReLU().forward(np.array([[-3.0, 2.0]]))
    np.testing.assert_array_equal(y, [[0.0, 2.0]])


def test_linear_dot_product():
    layer = Linear(np.array([[2.0, -1.0]]), np.array([0.0]))
    y, _ = layer.forward(np.array([[1.0, 1.0]]))
    np.testing.assert_array_equal(y, [[1.0]])


def test_maxpool_value_and_argmax_position():
    x = np.array([[1.0, 5.0], [3.0, 2.0]]).reshape(1, 1, 2, 2)
    y, ctx = MaxPool2D(2, 2).forward(x)
    assert y.reshape(-1).tolist() == [5.0]
    # flat in-window index 1 is row 0, column 1
    assert ctx["argmax"].reshape(-1).tolist() == [1]


def test_maxpool_tie_breaks_to_first_row_major():
    x = np.full((1, 1, 2, 2), 7.0)
    _, ctx = MaxPool2D(2, 2).forward(x)
    assert ctx["argmax"].reshape(-1).tolist() == [0]


def test_maxpool_rejects_overlap_and_bad_tiling():
    with pytest.raises(ValueError, match="stride"):
        MaxPool2D(3, 2)
    with pytest.raises(ValueError, match="tile"):
        MaxPool2D(3, 3).forward(np.zeros((1, 1, 4, 4)))
    with pytest.raises(ValueError, match=">= 1"):
        MaxPool2D(0, 0)


def test_linear_shape_validation():
    layer = Linear(np.zeros((3, 4)), np.zeros(3))
    with pytest.raises(ValueError, match=r"\(4,\)"):
        layer.out_shape((5,))
    with pytest.raises(ValueError, match="bias"):
        Linear(np.zeros((3, 4)), np.zeros(2))


def test_conv_shape_validation():
    layer = Conv2D(np.zeros((2, 3, 3, 3)), np.zeros(2), stride=2)
    with pytest.raises(ValueError, match="integral"):
        layer.out_shape((3, 6, 6))  # (6-3) not divisible by 2
    assert layer.out_shape((3, 7, 7)) == (2, 3, 3)
    with pytest.raises(ValueError, match="input shape"):
        layer.out_shape((4, 7, 7))


def _naive_conv(x, filters, bias, stride, padding):
    x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    c_out, c_in, kh, kw = filters.shape
    oh = (x.shape[1] - kh) // stride + 1
    ow = (x.shape[2] - kw) // stride + 1
    y = np.zeros((c_out, oh, ow))
    for co in range(c_out):
        for r in range(oh):
            for c in range(ow):
                patch = x[:, r * stride:r * stride + kh, c * stride:c * stride + kw]
                y[co, r, c] = (patch * filters[co]).sum() + bias[co]
    return y


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (3, 0)])
def test_conv_forward_matches_direct_sum(stride, padding):
    rng = np.random.default_rng(11)
    filters = rng.normal(size=(4, 2, 3, 3))
    bias = rng.normal(size=4)
    h = stride * 3 + 3 - 2 * padding  # picked so the output size is integral
    x = rng.normal(size=(2, h, h))
    y, _ = conv_forward(x[None], filters, bias, stride, padding)
    np.testing.assert_allclose(y[0], _naive_conv(x, filters, bias, stride, padding),
                               rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv_backward_input_is_adjoint(stride, padding):
    # <conv(x), g> == <x, conv_backward_input(g)> for all x, g
    rng = np.random.default_rng(5)
    filters = rng.normal(size=(3, 2, 3, 3))
    h = stride * 3 + 3 - 2 * padding
    x = rng.normal(size=(1, 2, h, h))
    y, _ = conv_forward(x, filters, None, stride, padding)
    g = rng.normal(size=y.shape)
    gx = conv_backward_input(g, filters, stride, padding)
    np.testing.assert_allclose((y * g).sum(), (x * gx).sum(), rtol=1e-12)


def test_flatten_round_trip():
    x = np.arange(24.0).reshape(1, 2, 3, 4)
    layer = Flatten()
    y, ctx = layer.forward(x)
    assert y.shape == (1, 24)
    np.testing.assert_array_equal(layer.backward_input(y, ctx), x)


def test_pool_backward_routes_to_argmax_only():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 2, 4, 4))
    layer = MaxPool2D(2, 2)
    y, ctx = layer.forward(x)
    g = rng.normal(size=y.shape)
    back = layer.backward_input(g, ctx)
    # nonzero exactly at per-window argmax positions
    assert np.count_nonzero(back) == y.size
    for ci in range(2):
        for r in range(2):
            for c in range(2):
                window = back[0, ci, 2 * r:2 * r + 2, 2 * c:2 * c + 2]
                src = x[0, ci, 2 * r:2 * r + 2, 2 * c:2 * c + 2]
                assert window.reshape(-1)[src.reshape(-1).argmax()] == g[0, ci, r, c]
