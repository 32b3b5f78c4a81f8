"""Discretization, scan kernels, and the bidirectional blocks."""

import numpy as np
import pytest

from oracles import scan_unrolled
from uskt import Tensor, grad_check, mean_all, silu, sum_all
from uskt.ssm import (BiRSSMBlock, BiSSMBlock, SSMParams, discretize,
                      discretize_selective, param_count, scan_parallel,
                      scan_sequential)
from uskt.tensor import mul


def t64(data, rg=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


def random_discrete(rng, e, s, dtype=np.float64):
    a_bar = rng.uniform(0.05, 0.95, size=(e, s)).astype(dtype)
    b_bar = rng.normal(0, 1, size=(e, s)).astype(dtype)
    c = rng.normal(0, 1, size=(e, s)).astype(dtype)
    d = rng.normal(0, 1, size=e).astype(dtype)
    return a_bar, b_bar, c, d


# -- discretize ---------------------------------------------------------

def test_discretize_delta_to_zero_limit():
    rng = np.random.default_rng(0)
    p = SSMParams(3, 4, rng, dtype=np.float64)
    p.delta_log.data[:] = np.log(1e-9)
    a_bar, b_bar = discretize(p)
    np.testing.assert_allclose(a_bar.data, 1.0, atol=1e-7)
    np.testing.assert_allclose(b_bar.data, 0.0, atol=1e-8)


def test_discretize_half_life():
    rng = np.random.default_rng(1)
    p = SSMParams(1, 1, rng, dtype=np.float64)
    p.A_log.data[:] = 0.0            # A = -exp(0) = -1
    p.delta_log.data[:] = np.log(np.log(2.0))
    a_bar, _ = discretize(p)
    np.testing.assert_allclose(a_bar.data, 0.5, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_discretize_always_stable(seed):
    p = SSMParams(8, 6, np.random.default_rng(seed), dtype=np.float64)
    a_bar, _ = discretize(p)
    assert np.abs(a_bar.data).max() < 1.0
    assert a_bar.data.min() > 0.0


# -- scan ---------------------------------------------------------------

def test_scan_pure_skip():
    rng = np.random.default_rng(2)
    e, s = 3, 2
    a_bar, b_bar, _, _ = random_discrete(rng, e, s)
    x = rng.normal(size=(7, e))
    y = scan_sequential(t64(a_bar), t64(b_bar), t64(np.zeros((e, s))),
                        t64(np.ones(e)), t64(x))
    np.testing.assert_allclose(y.data, x, atol=1e-14)


def test_scan_scalar_halving():
    y = scan_sequential(t64([[0.5]]), t64([[1.0]]), t64([[1.0]]),
                        t64([0.0]), t64([[1.0], [0.0], [0.0]]))
    np.testing.assert_allclose(y.data[:, 0], [1.0, 0.5, 0.25])


def test_scan_length_one_closed_form():
    rng = np.random.default_rng(3)
    e, s = 4, 3
    a_bar, b_bar, c, d = random_discrete(rng, e, s)
    x = rng.normal(size=(1, e))
    y = scan_sequential(t64(a_bar), t64(b_bar), t64(c), t64(d), t64(x))
    want = (c * (b_bar * x[0][:, None])).sum(axis=1) + d * x[0]
    np.testing.assert_allclose(y.data[0], want, atol=1e-14)


@pytest.mark.parametrize("seed", range(4))
def test_scan_matches_unrolled_oracle(seed):
    rng = np.random.default_rng(seed)
    e, s, length = 5, 4, 33
    a_bar, b_bar, c, d = random_discrete(rng, e, s)
    x = rng.normal(size=(length, e))
    got = scan_sequential(t64(a_bar), t64(b_bar), t64(c), t64(d), t64(x))
    np.testing.assert_allclose(got.data, scan_unrolled(a_bar, b_bar, c, d, x),
                               atol=1e-12)


def test_scan_parallel_equals_sequential_unit():
    rng = np.random.default_rng(4)
    for _ in range(20):
        e = int(rng.integers(1, 9))
        s = int(rng.integers(1, 6))
        length = int(rng.integers(1, 65))
        a_bar, b_bar, c, d = random_discrete(rng, e, s)
        x = rng.normal(size=(length, e))
        y_seq = scan_sequential(t64(a_bar), t64(b_bar), t64(c), t64(d), t64(x))
        y_par = scan_parallel(t64(a_bar), t64(b_bar), t64(c), t64(d), t64(x))
        np.testing.assert_allclose(y_par.data, y_seq.data, atol=1e-10)


def test_scan_zero_input_zero_output():
    rng = np.random.default_rng(5)
    a_bar, b_bar, c, d = random_discrete(rng, 3, 2)
    x = np.zeros((9, 3))
    y = scan_parallel(t64(a_bar), t64(b_bar), t64(c), t64(d), t64(x))
    assert not y.data.any()


def test_scan_batched_matches_loop():
    rng = np.random.default_rng(6)
    e, s, length, n = 3, 2, 11, 4
    a_bar, b_bar, c, d = random_discrete(rng, e, s)
    x = rng.normal(size=(n, length, e))
    y = scan_parallel(t64(a_bar), t64(b_bar), t64(c), t64(d), t64(x))
    for i in range(n):
        np.testing.assert_allclose(y.data[i],
                                   scan_unrolled(a_bar, b_bar, c, d, x[i]),
                                   atol=1e-12)


def test_scan_stability_bound_long_sequence():
    # |h_t| <= M * max|b_bar| / (1 - max|a_bar|) for |x| <= M
    rng = np.random.default_rng(7)
    p = SSMParams(4, 3, rng, dtype=np.float64)
    a_bar, b_bar = discretize(p)
    m = 2.0
    x = rng.uniform(-m, m, size=(1024, 4))
    y = scan_sequential(a_bar, b_bar, p.C, p.D, t64(x))
    assert np.isfinite(y.data).all()
    bound = m * np.abs(b_bar.data).max() / (1.0 - np.abs(a_bar.data).max())
    c_sum = np.abs(p.C.data).sum(axis=1).max()
    d_max = np.abs(p.D.data).max()
    assert np.abs(y.data).max() <= c_sum * bound + d_max * m + 1e-9


@pytest.mark.parametrize("parallel", [False, True])
def test_scan_gradcheck(parallel):
    rng = np.random.default_rng(8)
    e, s, length = 3, 2, 6
    a_bar = Tensor(rng.uniform(0.1, 0.9, size=(e, s)), dtype=np.float64, requires_grad=True)
    b_bar = Tensor(rng.normal(size=(e, s)), dtype=np.float64, requires_grad=True)
    c = Tensor(rng.normal(size=(e, s)), dtype=np.float64, requires_grad=True)
    d = Tensor(rng.normal(size=e), dtype=np.float64, requires_grad=True)
    x = Tensor(rng.normal(size=(length, e)), dtype=np.float64, requires_grad=True)
    r = Tensor(rng.normal(size=(length, e)), dtype=np.float64)
    fn = scan_parallel if parallel else scan_sequential

    rep = grad_check(lambda: sum_all(mul(fn(a_bar, b_bar, c, d, x), r)),
                     [a_bar, b_bar, c, d, x], name=f"scan(parallel={parallel})")
    assert rep.passed, rep


def test_scan_selective_per_step_params():
    rng = np.random.default_rng(9)
    e, s, length = 3, 2, 12
    p = SSMParams(e, s, rng, dtype=np.float64)
    w_delta = Tensor(rng.normal(0, 0.3, size=e), dtype=np.float64, requires_grad=True)
    x = t64(rng.normal(size=(length, e)))
    a_bar, b_bar = discretize_selective(p, w_delta, x)
    assert a_bar.shape == (length, e, s)
    assert np.abs(a_bar.data).max() < 1.0
    y_seq = scan_sequential(a_bar, b_bar, p.C, p.D, x)
    y_par = scan_parallel(a_bar, b_bar, p.C, p.D, x)
    np.testing.assert_allclose(y_par.data, y_seq.data, atol=1e-10)


# -- blocks ----------------------------------------------------------------

def make_passthrough(block):
    """Configure a block so every stage is an identity or a pure skip."""
    e = block.width
    block.in_linear.weight.data[:] = np.eye(e)
    block.in_linear.bias.data[:] = 0.0
    block.conv.weight.data[:] = 0.0
    block.conv.weight.data[:, 1] = 1.0
    block.conv.bias.data[:] = 0.0
    block.gate_linear.weight.data[:] = 0.0
    block.gate_linear.bias.data[:] = 0.0
    block.out_linear.weight.data[:] = np.eye(e)
    block.out_linear.bias.data[:] = 0.0
    cores = [block.ssm] if hasattr(block, "ssm") else [block.ssm_fwd, block.ssm_bwd]
    for core in cores:
        core.C.data[:] = 0.0
        core.D.data[:] = 1.0
    return block


@pytest.mark.parametrize("n_batch", [None, 3])
def test_birssm_shape_preserved(n_batch):
    rng = np.random.default_rng(10)
    blk = BiRSSMBlock(6, 4, rng, dtype=np.float64)
    shape = (9, 6) if n_batch is None else (n_batch, 9, 6)
    x = t64(rng.normal(size=shape))
    assert blk(x).shape == shape


def test_birssm_passthrough_is_double_silu():
    rng = np.random.default_rng(11)
    blk = make_passthrough(BiRSSMBlock(4, 3, rng, dtype=np.float64))
    x = rng.normal(size=(8, 4))
    out = blk(t64(x))
    want = silu(silu(t64(x))).data
    np.testing.assert_allclose(out.data, want, atol=1e-12)


def test_birssm_passthrough_position_locality():
    # zeroing input position i changes only output position i
    rng = np.random.default_rng(12)
    blk = make_passthrough(BiRSSMBlock(4, 3, rng, dtype=np.float64))
    x = rng.normal(size=(8, 4))
    base = blk(t64(x)).data
    for i in range(8):
        probe = x.copy()
        probe[i] = 0.0
        out = blk(t64(probe)).data
        changed = np.any(out != base, axis=1)
        assert changed[i] or np.allclose(x[i], 0)
        others = np.delete(np.arange(8), i)
        np.testing.assert_allclose(out[others], base[others], atol=1e-12)


def test_birssm_shared_core_drives_both_directions():
    rng = np.random.default_rng(13)
    blk = BiRSSMBlock(5, 3, rng, dtype=np.float64)
    x = t64(rng.normal(size=(7, 5)))
    fwd0, rev0 = blk.directional_passes(x)
    blk.ssm.B.data[0, 0] += 0.25
    fwd1, rev1 = blk.directional_passes(x)
    assert np.any(fwd0 != fwd1)
    assert np.any(rev0 != rev1)


def test_bissm_forward_core_isolated_from_reverse_branch():
    rng = np.random.default_rng(14)
    blk = BiSSMBlock(5, 3, rng, dtype=np.float64)
    x = t64(rng.normal(size=(7, 5)))
    _, rev0 = blk.directional_passes(x)
    blk.ssm_fwd.B.data[:] += 0.5
    blk.ssm_fwd.A_log.data[:] += 0.1
    fwd1, rev1 = blk.directional_passes(x)
    assert np.array_equal(rev0, rev1)          # bit-identical
    blk.ssm_bwd.B.data[0, 0] += 0.25
    _, rev2 = blk.directional_passes(x)
    assert np.any(rev1 != rev2)


def test_bissm_passthrough_pre_residual_doubling():
    rng = np.random.default_rng(15)
    blk = make_passthrough(BiSSMBlock(4, 2, rng, dtype=np.float64))
    x = rng.normal(size=(6, 4))
    s_fwd, s_bwd = blk.directional_passes(t64(x))
    want = silu(t64(x)).data
    np.testing.assert_allclose(s_fwd + s_bwd, 2.0 * want, atol=1e-12)


def test_param_count_formulas():
    rng = np.random.default_rng(16)
    e, s = 128, 16
    core = SSMParams(e, s, rng)
    assert core.core_param_count() == 3 * e * s + 2 * e == 6400
    bir = BiRSSMBlock(8, 4, rng)
    bi = BiSSMBlock(8, 4, rng)
    assert bi.ssm_core_param_count() == 2 * bir.ssm_core_param_count()
    # blocks differ by exactly one SSM core
    assert param_count(bi) - param_count(bir) == bir.ssm_core_param_count()


@pytest.mark.parametrize("cls", [BiRSSMBlock, BiSSMBlock])
def test_block_gradcheck(cls):
    rng = np.random.default_rng(17)
    blk = cls(4, 3, rng, dtype=np.float64)
    x = Tensor(rng.normal(size=(8, 4)), dtype=np.float64, requires_grad=True)
    r = Tensor(rng.normal(size=(8, 4)), dtype=np.float64)
    leaves = [x] + blk.parameters()
    rep = grad_check(lambda: sum_all(mul(blk(x), r)), leaves,
                     name=f"{cls.__name__}(L=8,E=4,S=3)")
    assert rep.passed, rep


def test_selective_block_gradcheck():
    rng = np.random.default_rng(18)
    blk = BiRSSMBlock(3, 2, rng, dtype=np.float64, selective=True)
    x = Tensor(rng.normal(size=(5, 3)), dtype=np.float64, requires_grad=True)
    rep = grad_check(lambda: mean_all(blk(x)), [x] + blk.parameters(),
                     name="BiRSSMBlock(selective)")
    assert rep.passed, rep
