import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from compensation import LayerGeometry
from errors import ArgumentError, ShapeError, StateError
from normalizers import (
    AffineParams,
    BnConfig,
    CbnState,
    batch_moments,
    bn_backward,
    bn_train_forward,
    cbn_backward,
    cbn_train_forward,
    eval_forward,
    naive_cbn_train_forward,
)
from oracles import finite_diff
from tensor_core import Rng, conv2d_forward

GEOM = LayerGeometry((3, 3), 1, 1)


def make_state(kind="cbn", window=1, burn_in=0, channels=2, eps=1e-5):
    return CbnState.create(channels, BnConfig(kind=kind, window=window, burn_in=burn_in, eps=eps))


def layer_inputs(rng, theta, n=2):
    y = rng.normal((n, theta.shape[1], 4, 4))
    return y, conv2d_forward(y, theta, 1, 1)


def test_bn_example():
    state = make_state("bn", channels=1, eps=1e-300)
    x = np.array([1.0, 2.0, 3.0]).reshape(3, 1)
    y, cache = bn_train_forward(x, state)
    assert_allclose(cache.x_hat.ravel(), [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-12)
    assert_allclose(y, cache.x_hat)


def test_bn_constant_channel_gives_beta():
    state = make_state("bn", channels=1)
    state.affine.beta[:] = 0.7
    y, cache = bn_train_forward(np.array([5.0, 5.0]).reshape(2, 1), state)
    assert_array_equal(cache.x_hat, 0.0)
    assert_array_equal(y.ravel(), [0.7, 0.7])


def test_bn_channel_mismatch():
    with pytest.raises(ShapeError):
        bn_train_forward(np.zeros((2, 3, 2, 2)), make_state("bn"))


def test_bn_backward_zero_upstream():
    state = make_state("bn")
    x = Rng(0).normal((3, 2, 2, 2))
    _, cache = bn_train_forward(x, state)
    gx, gg, gb = bn_backward(cache, np.zeros_like(x))
    assert not gx.any() and not gg.any() and not gb.any()


def test_bn_backward_matches_finite_differences():
    rng = Rng(1)
    x = rng.normal((3, 2, 2, 2))
    upstream = rng.normal(x.shape)
    state = make_state("bn")
    state.affine.gamma[:] = [1.5, 0.5]
    _, cache = bn_train_forward(x, state)
    gx, gg, _ = bn_backward(cache, upstream)

    def loss(xx):
        return np.sum(bn_train_forward(xx, make_state("bn"))[0] * upstream * np.array([1.5, 0.5]).reshape(1, 2, 1, 1))

    assert_allclose(gx, finite_diff(loss, x), rtol=1e-5, atol=1e-8)
    assert_allclose(gg, (upstream * cache.x_hat).sum(axis=(0, 2, 3)))


def test_output_renormalizes_to_identity():
    state = make_state("bn", channels=3)
    x = Rng(2).normal((4, 3, 3, 3), 2.0) + 1.0
    y, _ = bn_train_forward(x, state)
    mu, nu = batch_moments(y)
    assert_allclose(mu, 0.0, atol=1e-12)
    assert_allclose(nu - mu**2, 1.0, atol=1e-4)


def test_cbn_window_one_equals_bn():
    rng = Rng(3)
    theta = rng.normal((2, 2, 3, 3))
    y, x = layer_inputs(rng, theta)
    upstream = rng.normal(x.shape)
    bn_state, cbn_state = make_state("bn"), make_state("cbn", window=1)
    out_bn, cache_bn = bn_train_forward(x, bn_state)
    out_cbn, cache_cbn = cbn_train_forward(x, theta, y, GEOM, cbn_state)
    assert_allclose(out_cbn, out_bn, atol=1e-12)
    gx_bn, gg_bn, gb_bn = bn_backward(cache_bn, upstream)
    gx, g_theta, gg, gb = cbn_backward(cache_cbn, upstream)
    assert g_theta is None
    assert_allclose(gx, gx_bn, atol=1e-12)
    assert_allclose(gg, gg_bn, atol=1e-12)
    assert_allclose(gb, gb_bn, atol=1e-12)
    assert_allclose(cbn_state.running_mean, bn_state.running_mean, atol=1e-12)


def test_naive_window_one_equals_bn():
    x = Rng(4).normal((2, 2, 3, 3))
    out_bn, _ = bn_train_forward(x, make_state("bn"))
    out_naive, _ = naive_cbn_train_forward(x, make_state("naive-cbn", window=1))
    assert_allclose(out_naive, out_bn, atol=1e-12)


def test_frozen_weights_cbn_matches_naive_and_plain_average():
    rng = Rng(5)
    theta = rng.normal((2, 2, 3, 3))
    cbn, naive = make_state("cbn", window=3), make_state("naive-cbn", window=3)
    means = []
    for _ in range(4):
        y, x = layer_inputs(rng, theta)
        means.append(x.mean(axis=(0, 2, 3)))
        out_cbn, cache = cbn_train_forward(x, theta, y, GEOM, cbn)
        out_naive, _ = naive_cbn_train_forward(x, naive)
        assert_allclose(out_cbn, out_naive, atol=1e-12)
        cbn.t += 1
        naive.t += 1
    assert cache.window == 3
    assert_allclose(cache.mu_bar, np.mean(means[-3:], axis=0), atol=1e-12)


def test_cbn_compensates_after_weight_change():
    rng = Rng(6)
    theta = rng.normal((2, 2, 3, 3))
    state = make_state("cbn", window=2)
    y0, x0 = layer_inputs(rng, theta)
    cbn_train_forward(x0, theta, y0, GEOM, state)
    state.t += 1
    theta_new = theta + 0.01 * rng.normal(theta.shape)
    y1, x1 = layer_inputs(rng, theta_new)
    _, cache = cbn_train_forward(x1, theta_new, y1, GEOM, state)
    x0_now = conv2d_forward(y0, theta_new, 1, 1)
    expected = 0.5 * (x0_now.mean(axis=(0, 2, 3)) + x1.mean(axis=(0, 2, 3)))
    assert_allclose(cache.mu_bar, expected, atol=1e-12)


def test_burn_in_forces_window_one():
    rng = Rng(7)
    theta = rng.normal((2, 2, 3, 3))
    state = make_state("cbn", window=4, burn_in=3)
    windows = []
    for _ in range(6):
        y, x = layer_inputs(rng, theta)
        _, cache = cbn_train_forward(x, theta, y, GEOM, state)
        windows.append(cache.window)
        state.t += 1
    assert windows == [1, 1, 1, 4, 4, 4]
    assert len(state.records) == 3


def test_cbn_rebinding_detected():
    rng = Rng(8)
    theta = rng.normal((2, 2, 3, 3))
    state = make_state("cbn", window=2)
    y, x = layer_inputs(rng, theta)
    cbn_train_forward(x, theta, y, GEOM, state)
    state.t += 1
    wider = rng.normal((2, 3, 3, 3))
    y2 = rng.normal((2, 3, 4, 4))
    with pytest.raises(StateError):
        cbn_train_forward(conv2d_forward(y2, wider, 1, 1), wider, y2, GEOM, state)


def test_cbn_backward_taylor_term_matches_finite_differences():
    rng = Rng(9)
    theta_old = rng.normal((2, 2, 3, 3))
    y_old, x_old = layer_inputs(rng, theta_old)
    theta = theta_old + 0.1 * rng.normal(theta_old.shape)
    y, x = layer_inputs(rng, theta)
    upstream = rng.normal(x.shape)

    def seeded_state():
        state = make_state("cbn", window=2)
        cbn_train_forward(x_old, theta_old, y_old, GEOM, state)
        state.t += 1
        return state

    _, cache = cbn_train_forward(x, theta, y, GEOM, seeded_state())
    gx, g_theta, _, _ = cbn_backward(cache, upstream)

    # theta enters only through the Taylor terms; x is held fixed
    def loss_theta(th):
        out, _ = cbn_train_forward(x, th, y, GEOM, seeded_state())
        return np.sum(out * upstream)

    def loss_x(xx):
        out, _ = cbn_train_forward(xx, theta, y, GEOM, seeded_state())
        return np.sum(out * upstream)

    assert_allclose(g_theta, finite_diff(loss_theta, theta), rtol=1e-5, atol=1e-8)
    assert_allclose(gx, finite_diff(loss_x, x), rtol=1e-5, atol=1e-8)


def test_taylor_backprop_off():
    rng = Rng(10)
    theta = rng.normal((2, 2, 3, 3))
    state = CbnState.create(2, BnConfig(kind="cbn", window=2, taylor_backprop=False))
    for _ in range(2):
        y, x = layer_inputs(rng, theta)
        _, cache = cbn_train_forward(x, theta, y, GEOM, state)
        state.t += 1
    assert cbn_backward(cache, np.ones_like(x))[1] is None


def test_eval_forward():
    state = make_state("bn", channels=1)
    with pytest.raises(StateError):
        eval_forward(np.zeros((1, 1)), state)
    state.running_updates = 1
    x = np.array([[2.0], [-1.0]])
    assert_allclose(eval_forward(x, state), x / np.sqrt(1 + 1e-5))
    state.running_mean = np.array([3.0])
    state.affine = AffineParams(np.array([2.0]), np.array([0.25]))
    assert_array_equal(eval_forward(np.array([[3.0]]), state), [[0.25]])


def test_eval_does_not_mutate():
    state = make_state("bn")
    bn_train_forward(Rng(11).normal((2, 2, 2, 2)), state)
    before = (state.running_mean.copy(), state.running_var.copy(), state.running_updates)
    eval_forward(Rng(12).normal((2, 2, 2, 2)), state)
    assert_array_equal(state.running_mean, before[0])
    assert_array_equal(state.running_var, before[1])
    assert state.running_updates == before[2]


def test_running_statistics_decay():
    state = make_state("bn", channels=1)
    x = np.array([1.0, 3.0]).reshape(2, 1)
    bn_train_forward(x, state)
    assert state.running_mean[0] == pytest.approx(0.1 * 2.0)
    assert state.running_var[0] == pytest.approx(0.9 + 0.1 * 1.0)


def test_config_validation():
    with pytest.raises(ArgumentError):
        BnConfig(kind="group")
    with pytest.raises(ArgumentError):
        BnConfig(kind="cbn", window=0)
    assert BnConfig(kind="bn", window=8).window == 1


def test_eval_forward_repeated_calls_identical():
    state = make_state("cbn", window=3)
    rng = Rng(13)
    theta = rng.normal((2, 2, 3, 3))
    for _ in range(3):
        y, x = layer_inputs(rng, theta)
        cbn_train_forward(x, theta, y, GEOM, state)
        state.t += 1
    batch = rng.normal((3, 2, 4, 4))
    first = eval_forward(batch, state)
    assert all(eval_forward(batch, state).tobytes() == first.tobytes() for _ in range(3))


def test_cbn_uses_given_columns():
    from tensor_core import im2col

    rng = Rng(14)
    theta = rng.normal((2, 2, 3, 3))
    y, x = layer_inputs(rng, theta)
    with_cols, without = make_state("cbn", window=2), make_state("cbn", window=2)
    cbn_train_forward(x, theta, y, GEOM, with_cols, cols=im2col(y, (3, 3), 1, 1)[0])
    cbn_train_forward(x, theta, y, GEOM, without)
    assert_array_equal(with_cols.records[0].g_nu, without.records[0].g_nu)
    assert_array_equal(with_cols.records[0].g_mu, without.records[0].g_mu)
    assert with_cols.buffer_nbytes() == 8 * (2 + 2 + 18 + 36 + 36)
    with pytest.raises(ShapeError):
        cbn_train_forward(x, theta, y, GEOM, with_cols, cols=np.zeros((3, 18)))
