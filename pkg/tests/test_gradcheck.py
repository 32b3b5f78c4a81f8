"""Finite-difference verification of every primitive op's backward pass."""

import numpy as np
import pytest

from uskt import (Tape, Tensor, avg_pool2d, backward, bilinear_upsample2x,
                  concat_channels, conv1d_depthwise, conv2d, conv_transpose2d,
                  expand, grad_check, linear, log_softmax, mean_all, reshape,
                  reverse_seq, silu, sum_all, take_per_row, transpose)
from uskt.tensor import exp, mul, pow_scalar

TOL = 1e-4


def leaf(rng, shape, scale=1.0):
    # |x| <= 2 per the tensor-core gradient invariant
    return Tensor(np.clip(rng.normal(size=shape) * scale, -2, 2),
                  dtype=np.float64, requires_grad=True)


def proj(rng, t):
    """Random fixed projection to scalar: keeps every output element live."""
    r = Tensor(rng.normal(size=t.shape), dtype=np.float64)
    return sum_all(mul(t, r))


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_conv2d(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, (2, 5, 6))
    w = leaf(rng, (3, 2, 3, 3), 0.5)
    b = leaf(rng, (3,))
    rep = grad_check(lambda: proj(rng_fixed(seed), conv2d(x, w, b, stride=2, padding=1)),
                     [x, w, b], name="conv2d")
    assert rep.passed, rep


def rng_fixed(seed):
    return np.random.default_rng(10_000 + seed)


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_conv_transpose2d(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, (2, 3, 3))
    w = leaf(rng, (2, 3, 4, 4), 0.5)
    b = leaf(rng, (3,))
    rep = grad_check(lambda: proj(rng_fixed(seed), conv_transpose2d(x, w, b, stride=2, padding=1)),
                     [x, w, b], name="conv_transpose2d")
    assert rep.passed, rep


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_linear(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, (4, 6))
    w = leaf(rng, (3, 6), 0.5)
    b = leaf(rng, (3,))
    rep = grad_check(lambda: proj(rng_fixed(seed), linear(x, w, b)),
                     [x, w, b], name="linear")
    assert rep.passed, rep
    # tight example tolerance: linear is exactly quadratic in each leaf
    assert rep.max_rel_err < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_silu(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, (11,))
    rep = grad_check(lambda: proj(rng_fixed(seed), silu(x)), [x], name="silu")
    assert rep.passed, rep


def test_gradcheck_silu_near_zero():
    x = Tensor(np.linspace(-1e-3, 1e-3, 9), dtype=np.float64, requires_grad=True)
    rep = grad_check(lambda: sum_all(silu(x)), [x], name="silu@0")
    assert rep.passed, rep


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_bilinear(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, (2, 3, 4))
    rep = grad_check(lambda: proj(rng_fixed(seed), bilinear_upsample2x(x)),
                     [x], name="bilinear_upsample2x")
    assert rep.passed, rep


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_avg_pool(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, (2, 4, 6))
    rep = grad_check(lambda: proj(rng_fixed(seed), avg_pool2d(x, 2)),
                     [x], name="avg_pool2d")
    assert rep.passed, rep


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_concat_reverse(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng, (2, 3, 3))
    b = leaf(rng, (1, 3, 3))
    rep = grad_check(lambda: proj(rng_fixed(seed), concat_channels(a, b)),
                     [a, b], name="concat_channels")
    assert rep.passed, rep
    x = leaf(rng, (5, 3))
    rep = grad_check(lambda: proj(rng_fixed(seed + 50), reverse_seq(x)),
                     [x], name="reverse_seq")
    assert rep.passed, rep


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_conv1d_depthwise(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, (7, 3))
    w = leaf(rng, (3, 3), 0.5)
    b = leaf(rng, (3,))
    rep = grad_check(lambda: proj(rng_fixed(seed), conv1d_depthwise(x, w, b)),
                     [x, w, b], name="conv1d_depthwise")
    assert rep.passed, rep


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_softmax_gather_pow(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, (4, 5))
    idx = rng.integers(0, 5, size=4)

    def f():
        lp = take_per_row(log_softmax(x), idx)
        pt = exp(lp)
        return sum_all(mul(pow_scalar((pt * -1.0) + 1.0, 2.0), lp))

    rep = grad_check(f, [x], name="focal_pieces")
    assert rep.passed, rep


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_shape_ops(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, (2, 6))
    e = leaf(rng, (2, 1))

    def f():
        y = transpose(reshape(x, (3, 4)), (1, 0))
        z = expand(e, (2, 6))
        return sum_all(mul(reshape(y, (2, 6)), z))

    rep = grad_check(f, [x, e], name="shape_ops")
    assert rep.passed, rep


def test_gradcheck_composite_conv_silu_mse():
    # composite graph: conv -> silu -> mse against target, per the
    # tensor-core backward example (rel err < 1e-4, 64-bit, eps 1e-5)
    rng = np.random.default_rng(99)
    x = leaf(rng, (2, 5, 5))
    w = leaf(rng, (3, 2, 3, 3), 0.5)
    b = leaf(rng, (3,))
    target = Tensor(rng.normal(size=(3, 5, 5)), dtype=np.float64)

    def f():
        y = silu(conv2d(x, w, b, stride=1, padding=1))
        d = y - target
        return mean_all(mul(d, d))

    rep = grad_check(f, [x, w, b], eps=1e-5, tol=TOL, name="conv_silu_mse")
    assert rep.passed, rep


def test_gradcheck_rejects_float32():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(Exception):
        grad_check(lambda: sum_all(x), [x])
