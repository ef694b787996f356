import numpy as np
import pytest

from jointfh.layers import (Conv2d, GlobalAvgPool, Linear, MaxPool2d, ReLU, Residual, Sequential,
                            ShapeError, StaleCacheError, gradient_check, parameter_count)
from jointfh.tensor import make_rng
from oracles import conv_oracle


def random_loss(shape, seed):
    """Smooth scalar loss with a known gradient: sum(c * y + 0.5 * y**2)."""
    c = make_rng(seed, 99).normal(size=shape)

    def loss(y):
        return float(np.sum(c * y + 0.5 * y * y)), c + y
    return loss


def test_conv_identity_kernel():
    conv = Conv2d(2, 2, 1)
    conv.params["weight"][:] = np.eye(2)[:, :, None, None]
    x = make_rng(0).normal(size=(2, 2, 4, 5))
    assert np.array_equal(conv.forward(x), x)
    g = make_rng(1).normal(size=x.shape)
    assert np.array_equal(conv.backward(g), g)


def test_conv_constant_bias():
    conv = Conv2d(3, 2, 3, pad=1)
    conv.params["bias"][:] = [0.5, -2.0]
    out = conv.forward(make_rng(0).normal(size=(1, 3, 5, 5)))
    assert np.all(out[:, 0] == 0.5) and np.all(out[:, 1] == -2.0)


def test_conv_zero_grad():
    conv = Conv2d(2, 3, 3, pad=1, rng=make_rng(0))
    x = make_rng(1).normal(size=(2, 2, 5, 4))
    y = conv.forward(x)
    gx = conv.backward(np.zeros_like(y))
    assert not gx.any() and not conv.grads["weight"].any() and not conv.grads["bias"].any()


@pytest.mark.parametrize("seed", range(10))
def test_conv_matches_loop_oracle(seed):
    rng = make_rng(seed)
    k, pad = [(3, 0), (3, 1), (1, 0), (5, 2)][seed % 4]
    conv = Conv2d(2, 3, k, pad=pad, rng=rng)
    conv.params["bias"][:] = rng.normal(size=3)
    x = rng.normal(size=(1, 2, 5, 5))
    np.testing.assert_allclose(conv.forward(x), conv_oracle(x, conv.params["weight"], conv.params["bias"], pad),
                               rtol=0, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        Conv2d(3, 2, 3).forward(np.zeros((1, 2, 5, 5)))


def test_stale_cache():
    conv = Conv2d(1, 1, 3, rng=make_rng(0))
    with pytest.raises(StaleCacheError):
        conv.backward(np.zeros((1, 1, 3, 3)))
    y = conv.forward(np.ones((1, 1, 5, 5)))
    conv.backward(np.ones_like(y))
    with pytest.raises(StaleCacheError):
        conv.backward(np.ones_like(y))


def test_relu_definition():
    r = ReLU()
    assert r.forward(np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
    assert r.backward(np.array([5.0, 5.0, 5.0])).tolist() == [0.0, 0.0, 5.0]


def test_maxpool_constant_routes_to_first():
    pool = MaxPool2d(2, 2)
    x = np.full((1, 1, 5, 4), 3.0)
    y = pool.forward(x)
    assert y.shape == (1, 1, 2, 2) and np.all(y == 3.0)
    g = pool.backward(np.ones_like(y))
    expected = np.zeros((5, 4))
    expected[0::2, 0::2][:2] = 1.0
    assert np.array_equal(g[0, 0], expected)


def test_maxpool_overlapping_windows():
    pool = MaxPool2d(3, 2)
    x = make_rng(4).normal(size=(2, 3, 7, 6))
    y = pool.forward(x)
    assert y.shape == (2, 3, 3, 2)
    res = gradient_check(pool, x, random_loss(y.shape, 0), h=1e-5)
    assert res.max_rel_error < 1e-6


def test_residual_zero_branch_is_identity():
    block = Residual(4, rng=None)
    x = make_rng(0).normal(size=(2, 4, 5, 6))
    assert np.array_equal(block.forward(x), x)


def test_global_avg_pool():
    gap = GlobalAvgPool()
    x = make_rng(0).normal(size=(2, 3, 4, 5))
    np.testing.assert_allclose(gap.forward(x), x.mean(axis=(2, 3)))


def make_layer(kind, rng):
    if kind == "conv":
        return Conv2d(2, 3, 3, pad=1, rng=rng), (2, 2, 5, 4)
    if kind == "conv_nopad":
        return Conv2d(3, 2, 3, pad=0, rng=rng), (2, 3, 6, 5)
    if kind == "relu":
        return ReLU(), (2, 3, 4, 4)
    if kind == "maxpool":
        return MaxPool2d(2, 2), (2, 2, 5, 6)
    if kind == "residual":
        return Residual(2, rng=rng), (2, 2, 4, 5)
    if kind == "fc":
        return Linear(6, 4, rng=rng), (3, 6)
    if kind == "gap":
        return GlobalAvgPool(), (2, 3, 3, 4)
    raise KeyError(kind)


KINDS = ["conv", "conv_nopad", "relu", "maxpool", "residual", "fc", "gap"]


@pytest.mark.parametrize("kind", KINDS)
def test_layer_gradients_fine_step(kind):
    rng = make_rng(11)
    layer, shape = make_layer(kind, rng)
    x = rng.normal(size=shape)
    out_shape = layer.output_shape(shape)
    res = gradient_check(layer, x, random_loss(out_shape, 1), h=1e-5)
    assert res.max_rel_error < 1e-6, res


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("seed", range(20))
def test_layer_gradients_over_seeds(kind, seed):
    rng = make_rng(seed, 7)
    layer, shape = make_layer(kind, rng)
    x = rng.normal(size=shape)
    res = gradient_check(layer, x, random_loss(layer.output_shape(shape), seed), h=1e-3)
    assert res.max_rel_error < 1e-4, res


def test_linear_quadratic_is_near_exact():
    rng = make_rng(2)
    fc = Linear(5, 3, rng=rng)
    res = gradient_check(fc, rng.normal(size=(4, 5)), lambda y: (float(np.sum(y * y)), 2 * y), h=1e-3)
    assert res.max_rel_error < 1e-9


def test_checker_detects_wrong_gradient():
    rng = make_rng(2)
    fc = Linear(4, 2, rng=rng)
    res = gradient_check(fc, rng.normal(size=(3, 4)), lambda y: (float(np.sum(y * y)), 2.5 * y), h=1e-3)
    assert res.max_rel_error > 0.1


def test_checker_rejects_non_finite_loss():
    fc = Linear(2, 2, rng=make_rng(0))
    with pytest.raises(FloatingPointError):
        gradient_check(fc, np.ones((1, 2)), lambda y: (float("nan"), y))


def test_sequential_stack_gradients():
    rng = make_rng(5)
    net = Sequential([Conv2d(3, 4, 3, pad=1, rng=rng), ReLU(), MaxPool2d(), Residual(4, rng=rng),
                      GlobalAvgPool(), Linear(4, 3, rng=rng)])
    x = rng.normal(size=(2, 3, 6, 6))
    res = gradient_check(net, x, random_loss((2, 3), 0), h=1e-3)
    assert res.max_rel_error < 1e-4, res
    assert parameter_count(net) == (3 * 4 * 9 + 4) + 2 * (4 * 4 * 9 + 4) + (4 * 3 + 3)
