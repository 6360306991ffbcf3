"""Tests for the numpy autodiff core.

Every primitive is checked against central differences in float64.
"""

import numpy as np
import pytest

from effzero.tensorcore import (
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    batch_norm,
    check_finite,
    concat,
    conv2d,
    gradcheck,
    l2_normalize,
    lstm_cell,
    no_grad,
    scale_gradient,
    stop_gradient,
)

TOLERANCE = 1e-6


def _leaf(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, shape), requires_grad=True, dtype=np.float64)


@pytest.mark.parametrize(
    "name, build",
    [
        ("add_broadcast", lambda a, b: a + b[0]),
        ("sub", lambda a, b: a - b),
        ("mul_broadcast", lambda a, b: a * b[:, :1]),
        ("neg", lambda a, b: -a + b),
        ("sigmoid", lambda a, b: a.sigmoid()),
        ("tanh", lambda a, b: (a * b).tanh()),
        ("relu", lambda a, b: a.relu()),
        ("softmax", lambda a, b: a.softmax(axis=-1)),
        ("softmax_axis0", lambda a, b: a.softmax(axis=0)),
        ("log_softmax", lambda a, b: a.log_softmax()),
        ("sum_axis", lambda a, b: a.sum(axis=1)),
        ("sum_keepdims", lambda a, b: a.sum(axis=0, keepdims=True) * b),
        ("mean", lambda a, b: a.mean(axis=1)),
        ("mean_all", lambda a, b: a.mean() * b),
        ("reshape", lambda a, b: a.reshape(4, 3)),
        ("slice", lambda a, b: a[1:, ::2]),
        ("fancy_index", lambda a, b: a[np.array([0, 0, 2])]),
        ("concat", lambda a, b: concat([a, b], axis=1)),
        ("matmul", lambda a, b: a @ b.reshape(4, 3)),
        ("l2_normalize", lambda a, b: l2_normalize(a, axis=-1)),
        ("divide", lambda a, b: a / 3.0),
    ],
)
def test_primitive_gradients(name, build):
    """Test reverse-mode gradients match central differences."""
    rng = np.random.default_rng(0)
    a = _leaf(rng, 3, 4)
    b = _leaf(rng, 3, 4)
    projection = np.random.default_rng(1)
    weights_shape = build(a, b).shape
    weights = Tensor(projection.normal(size=weights_shape), dtype=np.float64)

    error = gradcheck(lambda: (build(a, b) * weights).sum(), [a, b])

    assert error < TOLERANCE, name


def test_log_gradient():
    """Test log on strictly positive inputs."""
    rng = np.random.default_rng(2)
    x = _leaf(rng, 5, low=0.5, high=2.0)
    assert gradcheck(lambda: x.log().sum(), [x]) < TOLERANCE


@pytest.mark.parametrize("stride, padding", [(1, 1), (2, 1), (1, 0)])
def test_conv2d_gradients(stride, padding):
    """Test convolution gradients for input and weights."""
    rng = np.random.default_rng(3)
    x = _leaf(rng, 2, 2, 5, 5)
    w = _leaf(rng, 3, 2, 3, 3)
    weights_rng = np.random.default_rng(4)
    shape = conv2d(x, w, stride=stride, padding=padding).shape
    weights = Tensor(weights_rng.normal(size=shape), dtype=np.float64)

    error = gradcheck(lambda: (conv2d(x, w, stride=stride, padding=padding) * weights).sum(), [x, w])

    assert error < TOLERANCE


def test_conv2d_matches_direct_loop():
    """Test the im2col forward pass against a direct cross-correlation."""
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    out = conv2d(Tensor(x), Tensor(w), stride=1, padding=1).data

    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((1, 3, 4, 4))
    for o in range(3):
        for i in range(4):
            for j in range(4):
                expected[0, o, i, j] = np.sum(padded[0, :, i : i + 3, j : j + 3] * w[o])
    np.testing.assert_allclose(out, expected, atol=1e-10)


@pytest.mark.parametrize("shape", [(6, 3), (4, 3, 2, 2)])
def test_batch_norm_training_gradients(shape):
    """Test batch-statistics normalization gradients."""
    rng = np.random.default_rng(6)
    x = _leaf(rng, *shape)
    gamma = _leaf(rng, 3, low=0.5, high=1.5)
    beta = _leaf(rng, 3)
    weights = Tensor(np.random.default_rng(7).normal(size=shape), dtype=np.float64)

    def loss():
        return (batch_norm(x, gamma, beta, None, None, training=True) * weights).sum()

    assert gradcheck(loss, [x, gamma, beta]) < TOLERANCE


def test_batch_norm_eval_uses_running_stats():
    """Test eval mode is the affine map of the running statistics and mutates nothing."""
    x = Tensor(np.array([[1.0, 2.0], [3.0, 6.0]]))
    gamma = Tensor(np.array([2.0, 1.0]))
    beta = Tensor(np.array([0.5, -0.5]))
    running_mean = np.array([1.0, 2.0])
    running_var = np.array([4.0, 1.0])

    out = batch_norm(x, gamma, beta, running_mean, running_var, training=False, eps=0.0).data

    np.testing.assert_allclose(out, [[0.5, -0.5], [2.5, 3.5]])
    np.testing.assert_array_equal(running_mean, [1.0, 2.0])
    np.testing.assert_array_equal(running_var, [4.0, 1.0])


def test_batch_norm_training_updates_running_stats():
    """Test training mode moves running statistics toward the batch."""
    x = Tensor(np.array([[0.0], [2.0]]))
    running_mean = np.zeros(1)
    running_var = np.ones(1)

    batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), running_mean, running_var, training=True, momentum=0.5)

    assert running_mean[0] == pytest.approx(0.5)
    # unbiased batch variance is 2
    assert running_var[0] == pytest.approx(1.5)


def test_lstm_cell_gradients():
    """Test the recurrent cell through all four gates."""
    rng = np.random.default_rng(8)
    size = 3
    x = _leaf(rng, 2, 4)
    hidden = _leaf(rng, 2, size)
    cell = _leaf(rng, 2, size)
    w_input = _leaf(rng, 4, 4 * size)
    w_hidden = _leaf(rng, size, 4 * size)
    bias = _leaf(rng, 4 * size)

    def loss():
        h, c = lstm_cell(x, hidden, cell, w_input, w_hidden, bias)
        return (h * h).sum() + c.sum()

    assert gradcheck(loss, [x, hidden, cell, w_input, w_hidden, bias]) < TOLERANCE


def test_scale_gradient():
    """Test scale_gradient is the identity forward and scales the gradient."""
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    y = scale_gradient(x, 0.5)
    np.testing.assert_array_equal(y.data, x.data)

    backward((y * 3.0).sum())

    np.testing.assert_allclose(x.grad, [1.5, 1.5])


def test_stop_gradient_blocks_upstream():
    """Test nothing upstream of stop_gradient receives gradient."""
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = Tensor(np.array([3.0, 4.0]), requires_grad=True)

    backward((stop_gradient(x * 2.0) * y).sum())

    assert x.grad is None
    np.testing.assert_allclose(y.grad, [2.0, 4.0])


def test_no_grad_records_nothing():
    """Test operations under no_grad produce graph-free tensors."""
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad
    assert y._ctx is None

    z = (x * 2.0).sum()
    assert z.requires_grad


def test_gradients_accumulate_across_uses_and_calls():
    """Test a leaf used twice gets the summed gradient, and repeated backward adds up."""
    x = Tensor(np.array([2.0]), requires_grad=True)

    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, [4.0])

    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, [8.0])


def test_backward_requires_scalar():
    """Test backward on a non-scalar raises ShapeError."""
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError, match="scalar"):
        backward(x * 2.0)


@pytest.mark.parametrize(
    "op",
    [
        lambda a, b: a + b,
        lambda a, b: a * b,
        lambda a, b: a @ b,
        lambda a, b: concat([a, b], axis=0),
        lambda a, b: a.reshape(7),
    ],
)
def test_shape_errors(op):
    """Test incompatible shapes raise ShapeError."""
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((4, 2)))
    with pytest.raises(ShapeError):
        op(a, b)


def test_tensor_dtypes():
    """Test integer data becomes float32 and float64 is preserved."""
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64
    assert Tensor([1.0], dtype=np.float64).dtype == np.float64


def test_item_and_division():
    """Test item() needs one element and dividing by a Tensor is refused."""
    assert Tensor([2.5]).item() == 2.5
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()
    with pytest.raises(TypeError):
        Tensor([1.0]) / Tensor([2.0])


def test_check_finite():
    """Test check_finite names the array."""
    check_finite("ok", np.ones(2))
    with pytest.raises(NonFiniteError, match="loss"):
        check_finite("loss", np.array([1.0, np.nan]))


def test_l2_normalize_unit_norm():
    """Test rows come out with unit length."""
    x = Tensor(np.random.default_rng(9).normal(size=(4, 5)))
    norms = np.linalg.norm(l2_normalize(x).data, axis=-1)
    np.testing.assert_allclose(norms, np.ones(4), rtol=1e-6)
