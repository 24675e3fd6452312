import math

import numpy as np
import pytest

from fbcnet import layers as L
from fbcnet.tensor import Tensor, gradient_check


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


# depthwise conv ----------------------------------------------------------------

def conv_oracle(x, w, b, m):
    nb, C, T = x.shape
    F = m * nb
    out = np.zeros((F, 1, T))
    for j in range(F):
        for t in range(T):
            acc = b[j]
            for c in range(C):
                acc += w[j, 0, c, 0] * x[j // m, c, t]
            out[j, 0, t] = acc
    return out


def test_conv_selector():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 5, 8))
    w = np.zeros((3, 1, 5, 1))
    w[:, 0, 3, 0] = 1.0
    out = L.depthwise_conv(Tensor(x), Tensor(w), Tensor(np.zeros(3)), m=1)
    np.testing.assert_array_equal(out.data[:, 0, :], x[:, 3, :])


def test_conv_zero_input_gives_bias():
    b = np.array([0.5, -1.0, 2.0, 3.0])
    out = L.depthwise_conv(Tensor(np.zeros((2, 3, 6))), Tensor(np.ones((4, 1, 3, 1))), Tensor(b), m=2)
    np.testing.assert_array_equal(out.data[:, 0, :], np.repeat(b[:, None], 6, axis=1))


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 3, 5)), rng.normal(size=(4, 1, 3, 1)), rng.normal(size=4)
    out = L.depthwise_conv(Tensor(x), Tensor(w), Tensor(b), m=2)
    assert np.abs(out.data - conv_oracle(x, w, b, 2)).max() < 1e-12


def test_conv_batched_matches_unbatched():
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(3, 2, 3, 5)), rng.normal(size=(4, 1, 3, 1)), rng.normal(size=4)
    out = L.depthwise_conv(Tensor(x), Tensor(w), Tensor(b), m=2)
    for i in range(3):
        assert np.abs(out.data[i] - conv_oracle(x[i], w, b, 2)).max() < 1e-12


def test_conv_shape_mismatch():
    with pytest.raises(ValueError):
        L.depthwise_conv(Tensor(np.zeros((2, 3, 5))), Tensor(np.zeros((4, 1, 2, 1))),
                         Tensor(np.zeros(4)), m=2)


def test_conv_gradcheck():
    rng = np.random.default_rng(3)
    x, w, b = (Tensor(rng.normal(size=(2, 2, 3, 5))), Tensor(rng.normal(size=(4, 1, 3, 1))),
               Tensor(rng.normal(size=4)))
    up = rng.normal(size=(2, 4, 1, 5))
    f = lambda: (L.depthwise_conv(x, w, b, 2) * up).sum()
    assert gradient_check(f, [x, w, b], tol=1e-6).passed


def test_conv_gradient_stays_within_band():
    # loss reading only filters of view 1 must leave view 0's input gradient at zero
    rng = np.random.default_rng(4)
    m = 3
    x = leaf(rng.normal(size=(2, 4, 6)))
    w, b = Tensor(rng.normal(size=(2 * m, 1, 4, 1))), Tensor(np.zeros(2 * m))
    out = L.depthwise_conv(x, w, b, m)
    mask = np.zeros(out.shape)
    mask[m:] = 1.0
    (out * mask).sum().backward()
    assert np.all(x.grad[0] == 0.0)
    assert np.all(x.grad[1] != 0.0)


# batch norm ---------------------------------------------------------------------

def test_bn_train_standardises():
    x = np.random.default_rng(5).normal(3.0, 40.0, size=(8, 3, 1, 50))
    p = L.BatchNormParams.create(3)
    out = L.batchnorm(Tensor(x), p, training=True).data
    mean = out.mean(axis=(0, 2, 3))
    var = out.var(axis=(0, 2, 3))
    assert np.abs(mean).max() <= 1e-9
    assert np.abs(var - 1).max() <= 1e-6


def test_bn_gamma_beta():
    x = np.random.default_rng(6).normal(size=(4, 2, 1, 100)) * 30
    p = L.BatchNormParams.create(2)
    p.gamma.data[:] = 2.0
    p.beta.data[:] = 3.0
    out = L.batchnorm(Tensor(x), p, training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 3.0, atol=1e-9)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 2.0, atol=1e-6)


def test_bn_eval_identity():
    x = np.random.default_rng(7).normal(size=(3, 4, 1, 10))
    p = L.BatchNormParams.create(4, eps=1e-12)
    out = L.batchnorm(Tensor(x), p, training=False).data
    assert np.abs(out - x).max() <= 1e-9


def test_bn_running_stats_update():
    x = np.random.default_rng(8).normal(2.0, 3.0, size=(5, 2, 1, 20))
    p = L.BatchNormParams.create(2)
    L.batchnorm(Tensor(x), p, training=True)
    n = 5 * 20
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3)) * n / (n - 1)
    np.testing.assert_allclose(p.running_mean, 0.1 * mu)
    np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * var)
    assert np.all(p.running_var >= 0)


def test_bn_single_value_rejected():
    with pytest.raises(ValueError):
        L.batchnorm(Tensor(np.ones((1, 2, 1, 1))), L.BatchNormParams.create(2), training=True)


@pytest.mark.parametrize("training", [True, False])
def test_bn_gradcheck(training):
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(3, 2, 1, 4)))
    p = L.BatchNormParams.create(2)
    p.gamma.data[:] = [1.5, 0.7]
    p.beta.data[:] = [0.1, -0.3]
    p.running_mean[:] = [0.2, -0.1]
    p.running_var[:] = [1.3, 0.8]
    up = rng.normal(size=(3, 2, 1, 4))
    saved = (p.running_mean.copy(), p.running_var.copy())

    def f():
        p.running_mean[:], p.running_var[:] = saved
        return (L.batchnorm(x, p, training) * up).sum()

    assert gradient_check(f, [x, p.gamma, p.beta], tol=1e-6).passed


# activations --------------------------------------------------------------------

def test_swish_values():
    out = L.activation(Tensor([0.0, 20.0]), "swish").data
    assert out[0] == 0.0
    assert 19.99 <= out[1] <= 20.0


def test_swish_oracle():
    x = np.linspace(-6, 6, 25)
    expected = np.array([v / (1 + math.exp(-v)) for v in x])
    np.testing.assert_allclose(L.activation(Tensor(x), "swish").data, expected, rtol=1e-14)


@pytest.mark.parametrize("kind", ["swish", "elu", "relu", "leaky_relu", "identity"])
def test_activation_gradcheck(kind):
    # stay away from the kink at 0 for the piecewise kinds
    x = np.random.default_rng(10).uniform(0.1, 3.0, size=12) * np.repeat([1, -1], 6)
    assert gradient_check(lambda t: L.activation(t, kind).sum(), Tensor(x), tol=1e-6).passed


def test_activation_values_other_kinds():
    x = np.array([-2.0, 0.5])
    np.testing.assert_allclose(L.activation_value(x, "elu"), [math.exp(-2) - 1, 0.5])
    np.testing.assert_allclose(L.activation_value(x, "relu"), [0.0, 0.5])
    np.testing.assert_allclose(L.activation_value(x, "leaky_relu"), [-0.02, 0.5])


def test_unknown_activation():
    with pytest.raises(ValueError):
        L.activation(Tensor([1.0]), "tanh")


# temporal layers ---------------------------------------------------------------

ALT = [1.0, -1.0, 1.0, -1.0]


def test_variance_constant_window():
    x = leaf(np.full(4, 3.7))
    out = L.variance_layer(x, 4)
    assert out.data[0] == 0.0
    out.sum().backward()
    np.testing.assert_array_equal(x.grad, 0.0)


def test_variance_alternating():
    x = leaf(ALT)
    out = L.variance_layer(x, 4)
    assert out.data[0] == 1.0
    out.sum().backward()
    np.testing.assert_array_equal(x.grad, [0.5, -0.5, 0.5, -0.5])


def test_variance_output_length():
    out = L.variance_layer(Tensor(np.random.default_rng(11).normal(size=(5, 1, 1000))), 250)
    assert out.shape == (5, 1, 4)


def test_variance_matches_numpy_population_var():
    x = np.random.default_rng(12).normal(size=(3, 1, 40))
    out = L.variance_layer(Tensor(x), 10).data
    np.testing.assert_allclose(out, x.reshape(3, 1, 4, 10).var(axis=-1, ddof=0), rtol=1e-13)


def test_variance_backward_closed_form():
    rng = np.random.default_rng(13)
    x = leaf(rng.normal(size=(6, 1, 20)))
    up = rng.normal(size=(6, 1, 4))
    (L.variance_layer(x, 5) * up).sum().backward()
    xw = x.data.reshape(6, 1, 4, 5)
    expected = (2 / 5) * (xw - xw.mean(-1, keepdims=True)) * up[..., None]
    # equal up to floating-point evaluation order
    np.testing.assert_allclose(x.grad, expected.reshape(6, 1, 20), rtol=4e-16, atol=4e-16)
    assert np.abs(x.grad.reshape(6, 1, 4, 5).sum(-1)).max() < 1e-12


def test_variance_gradcheck():
    rng = np.random.default_rng(14)
    up = rng.normal(size=(2, 1, 3))
    f = lambda t: (L.variance_layer(t, 4) * up).sum()
    assert gradient_check(f, Tensor(rng.normal(size=(2, 1, 12))), tol=1e-6).passed


def test_variance_window_must_divide():
    with pytest.raises(ValueError, match="divide"):
        L.variance_layer(Tensor(np.zeros((1, 1, 10))), 3)


def test_average_and_max_examples():
    assert L.temporal_layer(Tensor(ALT), "average", 4).data[0] == 0.0
    x = leaf(ALT)
    out = L.temporal_layer(x, L.TemporalLayerKind("max", 4))
    assert out.data[0] == 1.0
    out.sum().backward()
    np.testing.assert_array_equal(x.grad, [1.0, 0.0, 0.0, 0.0])
    assert L.temporal_layer(Tensor(ALT), "variance", 4).data[0] == 1.0


@pytest.mark.parametrize("kind", ["average", "max"])
def test_pooling_gradcheck(kind):
    rng = np.random.default_rng(15)
    up = rng.normal(size=(2, 1, 3))
    f = lambda t: (L.temporal_layer(t, kind, 4) * up).sum()
    assert gradient_check(f, Tensor(rng.normal(size=(2, 1, 12))), tol=1e-6).passed


def test_unknown_temporal_kind():
    with pytest.raises(ValueError):
        L.TemporalLayerKind("median", 4)
    with pytest.raises(ValueError):
        L.temporal_layer(Tensor(np.zeros(4)), "median", 4)


# log activation ------------------------------------------------------------------

def test_log_activation():
    x = leaf([1.0, 0.0, 0.5, 1e7])
    out = L.log_activation(x)
    assert out.data[0] == 0.0
    assert out.data[1] == pytest.approx(-13.815510557964274, abs=1e-12)
    assert out.data[3] == pytest.approx(math.log(1e6))
    out.sum().backward()
    np.testing.assert_allclose(x.grad, [1.0, 0.0, 2.0, 0.0])


# linear ---------------------------------------------------------------------------

def test_linear_identity_and_zero():
    x = np.array([1.0, -2.0, 3.0])
    out = L.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)
    b = np.array([0.1, 0.2])
    out = L.linear(Tensor(np.zeros(3)), Tensor(np.ones((2, 3))), Tensor(b))
    np.testing.assert_array_equal(out.data, b)


def test_linear_loop_oracle():
    rng = np.random.default_rng(16)
    W, b, x = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=4)
    expected = [b[i] + sum(W[i, j] * x[j] for j in range(4)) for i in range(3)]
    assert np.abs(L.linear(Tensor(x), Tensor(W), Tensor(b)).data - expected).max() < 1e-12


def test_linear_shape_mismatch():
    with pytest.raises(ValueError):
        L.linear(Tensor(np.zeros(5)), Tensor(np.zeros((3, 4))), Tensor(np.zeros(3)))


def test_linear_gradcheck():
    rng = np.random.default_rng(17)
    x, W, b = Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=3))
    up = rng.normal(size=(2, 3))
    assert gradient_check(lambda: (L.linear(x, W, b) * up).sum(), [x, W, b], tol=1e-6).passed


# max norm -------------------------------------------------------------------------

def test_max_norm_examples():
    w = np.array([[0.6, 0.8], [3.0, 4.0]])
    L.max_norm_project(w, 2.0)
    np.testing.assert_array_equal(w[0], [0.6, 0.8])
    np.testing.assert_allclose(w[1], [1.2, 1.6], rtol=1e-15)


def test_max_norm_postcondition():
    w = np.random.default_rng(18).normal(size=(16, 1, 5, 1)) * 10
    L.max_norm_project(w, 2.0)
    assert np.linalg.norm(w.reshape(16, -1), axis=1).max() <= 2.0 + 1e-12


# loss -----------------------------------------------------------------------------

def test_nll_uniform():
    loss = L.softmax_nll_loss(Tensor(np.zeros((3, 4))), [0, 1, 3])
    assert loss.item() == pytest.approx(math.log(4), abs=1e-15)


def test_nll_saturated():
    z = np.zeros((1, 4))
    z[0, 2] = 1000.0
    loss = L.softmax_nll_loss(Tensor(z), [2]).item()
    assert np.isfinite(loss) and loss < 1e-12


def test_nll_bad_label():
    with pytest.raises(ValueError):
        L.softmax_nll_loss(Tensor(np.zeros((2, 3))), [0, 3])


def test_nll_gradcheck():
    z = Tensor(np.random.default_rng(19).normal(size=(5, 4)))
    assert gradient_check(lambda t: L.softmax_nll_loss(t, [0, 1, 2, 3, 1]), z, tol=1e-6).passed


def test_softmax_rows_sum_to_one():
    p = L.softmax(np.random.default_rng(20).normal(size=(10, 4)) * 50)
    assert np.abs(p.sum(axis=1) - 1).max() <= 1e-12
