import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pepinet import engine
from pepinet.errors import NumericError, ShapeError

from conftest import conv_pool_margin


def correlate_bruteforce(img, kernel):
    kh, kw = kernel.shape
    h, w = img.shape
    out = np.zeros((h - kh + 1, w - kw + 1))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            s = 0.0
            for a in range(kh):
                for b in range(kw):
                    s += img[i + a, j + b] * kernel[a, b]
            out[i, j] = s
    return out


# -- dense -------------------------------------------------------------------

def test_dense_identity_relu():
    out, _ = engine.dense_apply(np.eye(2), np.zeros(2), np.array([1.0, -2.0]), "relu")
    np.testing.assert_array_equal(out, [1.0, 0.0])


def test_dense_zero_weights_gives_activated_bias():
    b = np.array([0.5, -1.0, 2.0])
    out, _ = engine.dense_apply(np.zeros((3, 4)), b, np.ones(4), "relu")
    np.testing.assert_array_equal(out, [0.5, 0.0, 2.0])


def test_dense_shape_error():
    with pytest.raises(ShapeError):
        engine.dense_apply(np.zeros((3, 4)), np.zeros(3), np.ones(5))


@pytest.mark.parametrize("activation", ["identity", "relu"])
def test_dense_backward_matches_finite_differences(rng, activation):
    for _ in range(50):
        w = rng.standard_normal((6, 4))
        b = rng.standard_normal(6)
        x = rng.standard_normal((3, 4))
        z, _ = engine.dense_apply(w, b, x)
        if np.abs(z).min() > 0.05:
            break
    target = rng.standard_normal((3, 6))

    def loss_fn(ps):
        w_, b_, x_ = ps
        out, cache = engine.dense_apply(w_, b_, x_, activation)
        dw, db, dx = engine.dense_backward(w_, cache, target)
        return float((out * target).sum()), [dw, db, dx]

    assert engine.finite_diff_check(loss_fn, [w, b, x], 1e-3) < 1e-3


# -- conv / pool ---------------------------------------------------------------

def test_conv_zero_kernels_give_zero_maps(rng):
    x = rng.standard_normal((2, 1, 28, 28))
    out, _ = engine.conv_block_apply(np.zeros((3, 1, 5, 5)), np.zeros(3), x)
    assert out.shape == (2, 3, 12, 12)
    assert not out.any()


def test_conv_shape_arithmetic_mnist():
    assert engine.conv_output_shape(28, 28) == (24, 24, 12, 12)
    assert engine.conv_output_shape(12, 12) == (8, 8, 4, 4)
    x = np.zeros((1, 1, 28, 28))
    z, _ = engine.conv2d(x, np.zeros((8, 1, 5, 5)), np.zeros(8))
    assert z.shape == (1, 8, 24, 24)
    p, _ = engine.max_pool(z)
    assert p.shape == (1, 8, 12, 12)


@pytest.mark.parametrize("n", [5, 6, 7, 9, 12, 28])
def test_shape_algebra(n):
    ch, cw, ph, pw = engine.conv_output_shape(n, n)
    assert ch == (n - 5) // 1 + 1 and ph == ch // 2


def test_center_tap_kernel_on_ramp_crops_interior():
    img = np.arange(36, dtype=float).reshape(6, 6)
    kernel = np.zeros((5, 5))
    kernel[2, 2] = 1.0
    z, _ = engine.conv2d(img[None, None], kernel[None, None], np.zeros(1))
    # hand enumeration: output (i, j) picks img[i+2, j+2]
    expected = np.array([[14.0, 15.0], [20.0, 21.0]])
    np.testing.assert_array_equal(z[0, 0], expected)
    np.testing.assert_array_equal(expected, correlate_bruteforce(img, kernel))


def test_conv_matches_bruteforce_correlation(rng):
    x = rng.standard_normal((2, 3, 9, 8))
    k = rng.standard_normal((4, 3, 5, 5))
    b = rng.standard_normal(4)
    z, _ = engine.conv2d(x, k, b)
    for n in range(2):
        for f in range(4):
            ref = sum(correlate_bruteforce(x[n, c], k[f, c]) for c in range(3)) + b[f]
            np.testing.assert_allclose(z[n, f], ref, rtol=1e-10, atol=1e-10)


def test_conv_too_small_input():
    with pytest.raises(ShapeError):
        engine.conv2d(np.zeros((1, 1, 4, 6)), np.zeros((1, 1, 5, 5)), np.zeros(1))


def test_max_pool_tie_goes_to_first_in_row_major():
    x = np.ones((1, 1, 2, 2))
    out, cache = engine.max_pool(x)
    assert out[0, 0, 0, 0] == 1.0
    dx = engine.max_pool_backward(cache, np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(dx[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_max_pool_drops_odd_edge():
    x = np.arange(25, dtype=float).reshape(1, 1, 5, 5)
    out, _ = engine.max_pool(x)
    np.testing.assert_array_equal(out[0, 0], [[6.0, 8.0], [16.0, 18.0]])


def test_conv_block_backward_matches_finite_differences(rng):
    for _ in range(100):
        x = rng.standard_normal((2, 2, 8, 8))
        k = rng.standard_normal((3, 2, 5, 5)) * 0.5
        b = rng.standard_normal(3)
        if conv_pool_margin(x, k, b) > 0.02:
            break
    else:
        pytest.fail("no smooth instance found")
    target = rng.standard_normal((2, 3, 2, 2))

    def loss_fn(ps):
        k_, b_, x_ = ps
        out, cache = engine.conv_block_apply(k_, b_, x_)
        dk, db, dx = engine.conv_block_backward(k_, cache, target)
        return float((out * target).sum()), [dk, db, dx]

    assert engine.finite_diff_check(loss_fn, [k, b, x], 1e-3) < 1e-3


# -- loss --------------------------------------------------------------------

def test_uniform_softmax_loss_is_ln10():
    loss, probs, _ = engine.softmax_cross_entropy(np.zeros(10), 3)
    assert loss == pytest.approx(math.log(10), abs=1e-6)
    assert loss == pytest.approx(2.302585, abs=1e-6)
    np.testing.assert_allclose(probs, 0.1)


def test_saturated_softmax_loss_vanishes():
    z = np.zeros(10)
    z[4] = 30.0
    loss, _, _ = engine.softmax_cross_entropy(z, 4)
    assert 0.0 <= loss < 1e-9


def test_softmax_label_out_of_range():
    with pytest.raises(ValueError):
        engine.softmax_cross_entropy(np.zeros(10), 10)


def test_softmax_grad_is_probs_minus_onehot(rng):
    z = rng.standard_normal(7)
    _, p, g = engine.softmax_cross_entropy(z, 2)
    onehot = np.eye(7)[2]
    np.testing.assert_allclose(g, p - onehot)


def test_softmax_grad_finite_differences(rng):
    z = rng.standard_normal((4, 10)) * 3
    y = rng.integers(0, 10, size=4)

    def loss_fn(ps):
        loss, _, g = engine.softmax_cross_entropy(ps[0], y)
        return loss, [g]

    assert engine.finite_diff_check(loss_fn, [z], 1e-3) < 1e-3


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12), st.data())
def test_loss_non_negative(logits, data):
    label = data.draw(st.integers(0, len(logits) - 1))
    loss, probs, _ = engine.softmax_cross_entropy(np.array(logits), label)
    assert loss >= 0.0
    assert probs.sum() == pytest.approx(1.0)


# -- sgd ---------------------------------------------------------------------

def test_learning_rate_schedule():
    s = engine.SgdSchedule()
    assert s.lr == pytest.approx(0.05)
    assert s.at_epoch(1).lr == pytest.approx(0.0495)
    assert s.at_epoch(10).lr == pytest.approx(0.05 * 0.99 ** 10)


def test_sgd_step_arithmetic():
    (w,) = engine.sgd_step([np.array([1.0])], [np.array([2.0])], engine.SgdSchedule(0.05))
    assert w[0] == pytest.approx(0.9)


def test_sgd_zero_gradient_keeps_params(rng):
    p = [rng.standard_normal((3, 2)).astype(np.float32)]
    out = engine.sgd_step(p, [np.zeros((3, 2), np.float32)], engine.SgdSchedule())
    assert out[0].tobytes() == p[0].tobytes()


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        engine.sgd_step([np.zeros(3)], [np.zeros(4)], engine.SgdSchedule())


# -- gradient checker -------------------------------------------------------

def test_fd_quadratic():
    err = engine.finite_diff_check(lambda ps: (float(ps[0][0] ** 2), [2 * ps[0]]), [np.array([3.0])], 1e-3)
    numeric = engine.numerical_gradient(lambda ps: float(ps[0][0] ** 2), [np.array([3.0])], 1e-3)
    assert numeric[0][0] == pytest.approx(6.0, abs=1e-4)
    assert err < 1e-6


def test_fd_linear_is_exact():
    a = np.array([0.5, -2.0, 4.0])
    err = engine.finite_diff_check(lambda ps: (float(a @ ps[0]), [a.copy()]), [np.ones(3)], 1e-3)
    assert err < 1e-10


def test_fd_detects_corrupted_gradient():
    err = engine.finite_diff_check(lambda ps: (float(ps[0][0] ** 2), [3 * ps[0]]), [np.array([3.0])], 1e-3)
    assert err > 0.1


def test_fd_non_finite_loss():
    with pytest.raises(NumericError):
        engine.finite_diff_check(lambda ps: (float("nan"), [ps[0]]), [np.ones(1)])


def test_determinism_bit_identical(rng):
    x = rng.standard_normal((3, 1, 12, 12)).astype(np.float32)
    layer = engine.new_conv_layer(1, 4, np.random.default_rng(7))
    a, _ = engine.conv_block_apply(layer.kernels, layer.bias, x)
    layer2 = engine.new_conv_layer(1, 4, np.random.default_rng(7))
    b, _ = engine.conv_block_apply(layer2.kernels, layer2.bias, x)
    assert a.tobytes() == b.tobytes()
