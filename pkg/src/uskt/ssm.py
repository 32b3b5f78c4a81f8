"""Diagonal state-space scans and the bidirectional blocks built on them.

The recurrence per channel e is

    h_t = a_bar_e * h_{t-1} + b_bar_e * x_{t,e}
    y_{t,e} = sum_s C_{e,s} h_{t,s} + D_e * x_{t,e}

with a_bar = exp(delta * A) and b_bar = delta * B, A strictly negative
and delta strictly positive, so |a_bar| < 1 and the scan is stable.

``scan_sequential`` runs the loop literally; ``scan_parallel`` computes
the same states with a Hillis-Steele inclusive scan over the affine
maps h -> a*h + b composed as (a2*a1, a2*b1 + b2).  Both record the
same analytic backward (an adjoint scan run in reverse).

BiRSSMBlock runs a forward scan, reverses, and scans again with the
*same* parameter tensors (the shared-weight design); BiSSMBlock is the
two-independent-SSM baseline it is compared against.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .nn import DepthwiseConv1d, Linear, Module
from .ops import conv1d_depthwise, reverse_seq
from .tensor import Tensor, expand, make_output, mul, neg, reshape, silu
from .tensor import add as t_add
from .tensor import exp as t_exp


class SSMParams(Module):
    """Trainable core of one SSM layer.

    A = -exp(A_log) keeps the continuous-time diagonal strictly
    negative; delta = exp(delta_log) keeps the step size strictly
    positive.  Core parameter count is 3*E*S + 2*E.
    """

    def __init__(self, width: int, state_size: int, rng: np.random.Generator,
                 dtype=np.float32) -> None:
        e, s = width, state_size
        self.A_log = Tensor(np.log(rng.uniform(0.5, 8.0, size=(e, s))).astype(dtype),
                            requires_grad=True)
        self.B = Tensor(rng.normal(0.0, 1.0 / np.sqrt(s), size=(e, s)).astype(dtype),
                        requires_grad=True)
        self.C = Tensor(rng.normal(0.0, 1.0 / np.sqrt(s), size=(e, s)).astype(dtype),
                        requires_grad=True)
        self.D = Tensor(np.ones(e, dtype=dtype), requires_grad=True)
        self.delta_log = Tensor(np.log(rng.uniform(0.001, 0.1, size=e)).astype(dtype),
                                requires_grad=True)
        self.width = e
        self.state_size = s

    def core_param_count(self) -> int:
        return self.param_count()


def discretize(params: SSMParams) -> tuple[Tensor, Tensor]:
    """(A_bar, B_bar) = (exp(delta*A), delta*B), differentiable."""
    e, s = params.width, params.state_size
    a_cont = neg(t_exp(params.A_log))                       # (E,S), < 0
    delta = t_exp(params.delta_log)                         # (E,), > 0
    dmat = expand(reshape(delta, (e, 1)), (e, s))
    return t_exp(mul(dmat, a_cont)), mul(dmat, params.B)


def discretize_selective(params: SSMParams, w_delta: Tensor,
                         x: Tensor) -> tuple[Tensor, Tensor]:
    """Input-dependent step size: delta_t = exp(delta_log + x_t * w_delta).

    Produces per-step (..., L, E, S) discrete parameters for the
    optional selective variant; ``x`` is the scan input sequence.
    """
    e, s = params.width, params.state_size
    shp = x.shape                                           # (..., L, E)
    z = t_add(mul(x, expand(w_delta, shp)), expand(params.delta_log, shp))
    delta = t_exp(z)                                        # (..., L, E)
    dmat = expand(reshape(delta, shp + (1,)), shp + (s,))   # (..., L, E, S)
    a_cont = expand(neg(t_exp(params.A_log)), shp + (s,))
    b_full = expand(params.B, shp + (s,))
    return t_exp(mul(dmat, a_cont)), mul(dmat, b_full)


# ----------------------------------------------------------------------
# scan kernel (autodiff primitive with shared analytic backward)
# ----------------------------------------------------------------------

def _norm_scan_shapes(a, b, c, d, x):
    """Normalize to x (N,L,E); a/b (E,S) or (N,L,E,S); returns metadata."""
    if x.ndim == 2:
        xb, had_batch = x[None], False
    elif x.ndim == 3:
        xb, had_batch = x, True
    else:
        raise ShapeError(f"scan: x must be (L, E) or (N, L, E), got {x.shape}")
    n, length, e = xb.shape
    if c.ndim != 2 or c.shape[0] != e:
        raise ShapeError(f"scan: C must be (E, S) with E={e}, got {c.shape}")
    s = c.shape[1]
    if d.shape != (e,):
        raise ShapeError(f"scan: D must be ({e},), got {d.shape}")
    if a.shape != b.shape:
        raise ShapeError(f"scan: A_bar {a.shape} != B_bar {b.shape}")
    if a.shape == (e, s):
        per_step = False
        ab, bb = a, b
    else:
        per_step = True
        ab = a if a.ndim == 4 else a[None]
        bb = b if b.ndim == 4 else b[None]
        if ab.shape != (n, length, e, s):
            raise ShapeError(
                f"scan: per-step A_bar must be ({n}, {length}, {e}, {s}), got {a.shape}")
    return xb, ab, bb, had_batch, per_step, (n, length, e, s)


def _scan_states_sequential(ab, bb, xb, per_step, dims):
    n, length, e, s = dims
    hs = np.empty((n, length, e, s), dtype=xb.dtype)
    h = np.zeros((n, e, s), dtype=xb.dtype)
    for t in range(length):
        at = ab[:, t] if per_step else ab
        bt = bb[:, t] if per_step else bb
        h = at * h + bt * xb[:, t, :, None]
        hs[:, t] = h
    return hs


def _scan_states_parallel(ab, bb, xb, per_step, dims):
    n, length, e, s = dims
    if per_step:
        acc_a = ab.copy()
        acc_b = bb * xb[..., None]
    else:
        acc_a = np.broadcast_to(ab, (n, length, e, s)).copy()
        acc_b = bb * xb[..., None]
    offset = 1
    while offset < length:
        new_b = acc_b[:, offset:] + acc_a[:, offset:] * acc_b[:, :-offset]
        new_a = acc_a[:, offset:] * acc_a[:, :-offset]
        acc_b[:, offset:] = new_b
        acc_a[:, offset:] = new_a
        offset *= 2
    return acc_b        # h_t, since h_0 = 0


def _make_scan(a_bar: Tensor, b_bar: Tensor, c: Tensor, d: Tensor, x: Tensor,
               parallel: bool) -> Tensor:
    xb, ab, bb, had_batch, per_step, dims = _norm_scan_shapes(
        a_bar.data, b_bar.data, c.data, d.data, x.data)
    n, length, e, s = dims
    states = _scan_states_parallel if parallel else _scan_states_sequential
    hs = states(ab, bb, xb, per_step, dims)
    y = np.einsum("ntes,es->nte", hs, c.data) + xb * d.data
    if not had_batch:
        y = y[0]

    def bwd(g, needs):
        gy = g if had_batch else g[None]                    # (N,L,E)
        gd = np.einsum("nte,nte->e", gy, xb) if needs[3] else None
        gc = np.einsum("nte,ntes->es", gy, hs) if needs[2] else None
        need_a, need_b, need_x = needs[0], needs[1], needs[4]
        ga = gb = gx = None
        if need_a:
            ga = np.zeros((n, length, e, s), dtype=gy.dtype) if per_step \
                else np.zeros((e, s), dtype=gy.dtype)
        if need_b:
            gb = np.zeros_like(ga) if per_step and need_a else (
                np.zeros((n, length, e, s), dtype=gy.dtype) if per_step
                else np.zeros((e, s), dtype=gy.dtype))
        if need_x:
            gx = np.empty((n, length, e), dtype=gy.dtype)
        lam = np.zeros((n, e, s), dtype=gy.dtype)
        for t in range(length - 1, -1, -1):
            a_next = (ab[:, t + 1] if per_step else ab) if t + 1 < length else 0.0
            lam = gy[:, t, :, None] * c.data + (a_next * lam if t + 1 < length else 0.0)
            h_prev = hs[:, t - 1] if t > 0 else 0.0
            if need_a:
                contrib = lam * h_prev if t > 0 else np.zeros_like(lam)
                if per_step:
                    ga[:, t] = contrib
                else:
                    ga += contrib.sum(axis=0)
            if need_b:
                contrib = lam * xb[:, t, :, None]
                if per_step:
                    gb[:, t] = contrib
                else:
                    gb += contrib.sum(axis=0)
            if need_x:
                bt = bb[:, t] if per_step else bb
                gx[:, t] = (lam * bt).sum(axis=2) + gy[:, t] * d.data
        if per_step:
            if ga is not None and a_bar.data.ndim == 3:
                ga = ga[0]
            if gb is not None and b_bar.data.ndim == 3:
                gb = gb[0]
        if gx is not None and not had_batch:
            gx = gx[0]
        return ga, gb, gc, gd, gx

    return make_output("ssm_scan", y, (a_bar, b_bar, c, d, x), bwd)


def scan_sequential(a_bar: Tensor, b_bar: Tensor, c: Tensor, d: Tensor,
                    x: Tensor) -> Tensor:
    """Literal step-by-step evaluation of the recurrence."""
    return _make_scan(a_bar, b_bar, c, d, x, parallel=False)


def scan_parallel(a_bar: Tensor, b_bar: Tensor, c: Tensor, d: Tensor,
                  x: Tensor) -> Tensor:
    """Associative-scan evaluation; same result as ``scan_sequential``."""
    return _make_scan(a_bar, b_bar, c, d, x, parallel=True)


# ----------------------------------------------------------------------
# bidirectional blocks
# ----------------------------------------------------------------------

class BiRSSMBlock(Module):
    """Bidirectional-reverse block sharing ONE SSM core across directions.

    Pipeline for input x of shape (L, E) or (N, L, E):
      conv-mapped   u  = depthwise_conv(in_linear(x))
      forward pass  s+ = SiLU(scan(u))
      reverse pass  s- = SiLU(scan(reverse(s+)))     [same SSM parameters]
      output        out_linear(reverse(s-) + SiLU(gate_linear(x)))
    The inner result is re-reversed before the gated residual add so
    positions align; the output is in original order.
    """

    def __init__(self, width: int, state_size: int, rng: np.random.Generator,
                 dtype=np.float32, conv_kernel: int = 3, selective: bool = False,
                 parallel: bool = True) -> None:
        self.in_linear = Linear(width, width, rng, dtype)
        self.gate_linear = Linear(width, width, rng, dtype)
        self.conv = DepthwiseConv1d(width, conv_kernel, rng, dtype)
        self.ssm = SSMParams(width, state_size, rng, dtype)
        self.out_linear = Linear(width, width, rng, dtype)
        if selective:
            self.w_delta = Tensor(
                rng.normal(0.0, 1.0 / np.sqrt(width), size=width).astype(dtype),
                requires_grad=True)
        self.width = width
        self.selective = selective
        self.parallel = parallel

    def _scan(self, seq: Tensor) -> Tensor:
        if self.selective:
            a_bar, b_bar = discretize_selective(self.ssm, self.w_delta, seq)
        else:
            a_bar, b_bar = discretize(self.ssm)
        return _make_scan(a_bar, b_bar, self.ssm.C, self.ssm.D, seq, self.parallel)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.width:
            raise ShapeError(f"BiRSSMBlock: width {self.width} != input {x.shape}")
        u = conv1d_depthwise(self.in_linear(x), self.conv.weight, self.conv.bias)
        s_fwd = silu(self._scan(u))
        s_rev = silu(self._scan(reverse_seq(s_fwd)))
        gate = silu(self.gate_linear(x))
        return self.out_linear(t_add(reverse_seq(s_rev), gate))

    def directional_passes(self, x: Tensor) -> tuple[np.ndarray, np.ndarray]:
        """Raw forward-scan and (re-reversed) reverse-scan branch outputs."""
        u = conv1d_depthwise(self.in_linear(x), self.conv.weight, self.conv.bias)
        s_fwd = silu(self._scan(u))
        s_rev = silu(self._scan(reverse_seq(s_fwd)))
        return s_fwd.data.copy(), reverse_seq(s_rev).data.copy()

    def ssm_core_param_count(self) -> int:
        return self.ssm.core_param_count()


class BiSSMBlock(Module):
    """Baseline bidirectional block with two independent SSM cores.

    The forward core scans the conv-mapped sequence; the backward core
    scans its reversal; the re-reversed result is summed with the
    forward branch before the gated residual and output projection.
    """

    def __init__(self, width: int, state_size: int, rng: np.random.Generator,
                 dtype=np.float32, conv_kernel: int = 3, parallel: bool = True) -> None:
        self.in_linear = Linear(width, width, rng, dtype)
        self.gate_linear = Linear(width, width, rng, dtype)
        self.conv = DepthwiseConv1d(width, conv_kernel, rng, dtype)
        self.ssm_fwd = SSMParams(width, state_size, rng, dtype)
        self.ssm_bwd = SSMParams(width, state_size, rng, dtype)
        self.out_linear = Linear(width, width, rng, dtype)
        self.width = width
        self.parallel = parallel

    def _scan(self, params: SSMParams, seq: Tensor) -> Tensor:
        a_bar, b_bar = discretize(params)
        return _make_scan(a_bar, b_bar, params.C, params.D, seq, self.parallel)

    def _branches(self, x: Tensor) -> tuple[Tensor, Tensor]:
        u = conv1d_depthwise(self.in_linear(x), self.conv.weight, self.conv.bias)
        s_fwd = silu(self._scan(self.ssm_fwd, u))
        s_bwd = silu(self._scan(self.ssm_bwd, reverse_seq(u)))
        return s_fwd, reverse_seq(s_bwd)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.width:
            raise ShapeError(f"BiSSMBlock: width {self.width} != input {x.shape}")
        s_fwd, s_bwd = self._branches(x)
        gate = silu(self.gate_linear(x))
        return self.out_linear(t_add(t_add(s_fwd, s_bwd), gate))

    def directional_passes(self, x: Tensor) -> tuple[np.ndarray, np.ndarray]:
        """Pre-sum branch outputs (forward, re-reversed backward)."""
        s_fwd, s_bwd = self._branches(x)
        return s_fwd.data.copy(), s_bwd.data.copy()

    def ssm_core_param_count(self) -> int:
        return self.ssm_fwd.core_param_count() + self.ssm_bwd.core_param_count()


def param_count(block: Module) -> int:
    """Exact trainable scalar count of a block."""
    return block.trainable_param_count()
