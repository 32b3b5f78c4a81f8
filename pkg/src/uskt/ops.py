"""Spatial network ops: convolutions, pooling, upsampling, concat, reverse.

All ops accept either the documented unbatched layout (e.g. conv2d on
C x H x W) or the same layout with one leading batch axis; the batch
case is what training uses.  Convolutions run as im2col + GEMM; the
column matrix is rebuilt during backward instead of cached, trading a
little compute for activation memory.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, _check_same_dtype, make_output

# ----------------------------------------------------------------------
# im2col / col2im cores (raw arrays)
# ----------------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) padded input -> (N, C*k*k, ho*wo) column matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, k: int, s: int, ho: int, wo: int,
            hp: int, wp: int) -> np.ndarray:
    """Scatter-add columns back onto the (N, C, hp, wp) padded grid."""
    n = cols.shape[0]
    c = cols.shape[1] // (k * k)
    cr = cols.reshape(n, c, k, k, ho, wo)
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + s * ho:s, j:j + s * wo:s] += cr[:, :, i, j]
    return xp


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p]


def _batched(x: Tensor, op: str, rank: int):
    """View x.data with exactly one leading batch axis; rank = unbatched ndim."""
    if x.ndim == rank:
        return x.data[None], False
    if x.ndim == rank + 1:
        return x.data, True
    raise ShapeError(f"{op}: expected {rank}-d or {rank + 1}-d input, got {x.shape}")


# ----------------------------------------------------------------------
# convolutions
# ----------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding.

    x: (C_in, H, W) or (N, C_in, H, W); weight: (C_out, C_in, k, k).
    Output spatial extent is floor((H + 2*padding - k)/stride) + 1.
    """
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be (C_out, C_in, k, k), got {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    if k < 1 or stride < 1:
        raise ShapeError(f"conv2d: need k >= 1 and stride >= 1, got k={k} stride={stride}")
    xd, had_batch = _batched(x, "conv2d", 3)
    n, c, h, w = xd.shape
    if c != c_in:
        raise ShapeError(
            f"conv2d: input channels mismatch: input shape {x.shape} vs weight shape {weight.shape}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    _check_same_dtype("conv2d", *([x, weight] + ([bias] if bias is not None else [])))

    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    w2 = weight.data.reshape(c_out, c_in * k * k)
    cols = _im2col(_pad2d(xd, padding), k, stride, ho, wo)
    out = np.matmul(w2, cols)                       # (n, c_out, ho*wo)
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(n, c_out, ho, wo)
    if not had_batch:
        out = out[0]

    def bwd(g, needs):
        gm = (g if had_batch else g[None]).reshape(n, c_out, ho * wo)
        gx = gw = gb = None
        if needs[0]:
            dcols = np.matmul(w2.T, gm)
            gxp = _col2im(dcols, k, stride, ho, wo, h + 2 * padding, w + 2 * padding)
            gx = _unpad2d(gxp, padding)
            if not had_batch:
                gx = gx[0]
        if needs[1]:
            cols_b = _im2col(_pad2d(xd, padding), k, stride, ho, wo)
            gw = np.tensordot(gm, cols_b, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is None:
            return gx, gw
        if needs[2]:
            gb = gm.sum(axis=(0, 2))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output("conv2d", out, inputs, bwd)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2-d convolution (deconvolution).

    x: (C_in, H, W) or batched; weight: (C_in, C_out, k, k).
    Output spatial extent is (H - 1)*stride - 2*padding + k.
    """
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv_transpose2d: weight must be (C_in, C_out, k, k), got {weight.shape}")
    c_in, c_out, k, _ = weight.shape
    if stride < 1:
        raise ShapeError(f"conv_transpose2d: need stride >= 1, got {stride}")
    xd, had_batch = _batched(x, "conv_transpose2d", 3)
    n, c, h, w = xd.shape
    if c != c_in:
        raise ShapeError(
            f"conv_transpose2d: input channels mismatch: input shape {x.shape} vs weight shape {weight.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({c_out},)")
    _check_same_dtype("conv_transpose2d", *([x, weight] + ([bias] if bias is not None else [])))
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: output extent {ho}x{wo} not positive")

    w2 = weight.data.reshape(c_in, c_out * k * k)
    xm = xd.reshape(n, c_in, h * w)
    cols = np.matmul(w2.T, xm)                      # (n, c_out*k*k, h*w)
    outp = _col2im(cols, k, stride, h, w, ho + 2 * padding, wo + 2 * padding)
    out = _unpad2d(outp, padding)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    if not had_batch:
        out = out[0]

    def bwd(g, needs):
        gb4 = g if had_batch else g[None]
        gcols = _im2col(_pad2d(gb4, padding), k, stride, h, w)
        gx = gw = gbias = None
        if needs[0]:
            gx = np.matmul(w2, gcols).reshape(n, c_in, h, w)
            if not had_batch:
                gx = gx[0]
        if needs[1]:
            gw = np.tensordot(xm, gcols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is None:
            return gx, gw
        if needs[2]:
            gbias = gb4.sum(axis=(0, 2, 3))
        return gx, gw, gbias

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output("conv_transpose2d", out, inputs, bwd)


def conv1d_depthwise(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 1-d convolution over the sequence axis, zero padded.

    x: (L, E) or (N, L, E); weight: (E, k) with odd k (default usage k=3).
    """
    if weight.ndim != 2:
        raise ShapeError(f"conv1d_depthwise: weight must be (E, k), got {weight.shape}")
    e_w, k = weight.shape
    if k % 2 != 1:
        raise ShapeError(f"conv1d_depthwise: kernel width must be odd, got {k}")
    xd, had_batch = _batched(x, "conv1d_depthwise", 2)
    n, length, e = xd.shape
    if e != e_w:
        raise ShapeError(f"conv1d_depthwise: channels mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (e,):
        raise ShapeError(f"conv1d_depthwise: bias shape {bias.shape} != ({e},)")
    _check_same_dtype("conv1d_depthwise", *([x, weight] + ([bias] if bias is not None else [])))

    pad = k // 2
    xp = np.pad(xd, ((0, 0), (pad, pad), (0, 0)))
    out = np.zeros_like(xd)
    for j in range(k):
        out += xp[:, j:j + length] * weight.data[:, j]
    if bias is not None:
        out = out + bias.data
    if not had_batch:
        out = out[0]

    def bwd(g, needs):
        g3 = g if had_batch else g[None]
        gx = gw = gb = None
        if needs[0]:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + length] += g3 * weight.data[:, j]
            gx = gxp[:, pad:pad + length]
            if not had_batch:
                gx = gx[0]
        if needs[1]:
            gw = np.empty_like(weight.data)
            for j in range(k):
                gw[:, j] = (g3 * xp[:, j:j + length]).sum(axis=(0, 1))
        if bias is None:
            return gx, gw
        if needs[2]:
            gb = g3.sum(axis=(0, 1))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output("conv1d_depthwise", out, inputs, bwd)


# ----------------------------------------------------------------------
# pooling / resampling
# ----------------------------------------------------------------------

def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling; k must divide both extents."""
    xd, had_batch = _batched(x, "avg_pool2d", 3)
    n, c, h, w = xd.shape
    if k < 1 or h % k or w % k:
        raise ShapeError(f"avg_pool2d: k={k} must divide spatial extents {h}x{w}")
    ho, wo = h // k, w // k
    out = xd.reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))
    if not had_batch:
        out = out[0]

    def bwd(g, needs):
        g4 = g if had_batch else g[None]
        gx = np.repeat(np.repeat(g4, k, axis=2), k, axis=3) / (k * k)
        return (gx if had_batch else gx[0],)

    return make_output("avg_pool2d", out, (x,), bwd)


_INTERP_CACHE: dict[tuple[int, str], np.ndarray] = {}


def _interp_matrix(n_in: int, dtype) -> np.ndarray:
    """(2n x n) bilinear x2 interpolation matrix, half-pixel-center convention."""
    key = (n_in, np.dtype(dtype).str)
    m = _INTERP_CACHE.get(key)
    if m is None:
        m = np.zeros((2 * n_in, n_in), dtype=dtype)
        for o in range(2 * n_in):
            src = (o + 0.5) / 2.0 - 0.5
            i0 = int(np.floor(src))
            w1 = src - i0
            m[o, min(max(i0, 0), n_in - 1)] += 1.0 - w1
            m[o, min(max(i0 + 1, 0), n_in - 1)] += w1
        _INTERP_CACHE[key] = m
    return m


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Double both spatial extents by bilinear interpolation.

    Uses the half-pixel-center (align-corners=false) convention, which
    preserves constant fields exactly.
    """
    xd, had_batch = _batched(x, "bilinear_upsample2x", 3)
    n, c, h, w = xd.shape
    mh = _interp_matrix(h, xd.dtype)
    mw = _interp_matrix(w, xd.dtype)
    xr = xd.reshape(n * c, h, w)
    out = np.matmul(np.matmul(mh, xr), mw.T).reshape(n, c, 2 * h, 2 * w)
    if not had_batch:
        out = out[0]

    def bwd(g, needs):
        g4 = (g if had_batch else g[None]).reshape(n * c, 2 * h, 2 * w)
        gx = np.matmul(np.matmul(mh.T, g4), mw).reshape(n, c, h, w)
        return (gx if had_batch else gx[0],)

    return make_output("bilinear_upsample2x", out, (x,), bwd)


# ----------------------------------------------------------------------
# structure ops
# ----------------------------------------------------------------------

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis of (..., C, H, W) tensors."""
    ad, a_batch = _batched(a, "concat_channels", 3)
    bd, b_batch = _batched(b, "concat_channels", 3)
    if a_batch != b_batch or ad.shape[0] != bd.shape[0]:
        raise ShapeError(f"concat_channels: batch mismatch {a.shape} vs {b.shape}")
    if ad.shape[2:] != bd.shape[2:]:
        raise ShapeError(f"concat_channels: spatial mismatch {a.shape} vs {b.shape}")
    _check_same_dtype("concat_channels", a, b)
    c1 = ad.shape[1]
    out = np.concatenate([ad, bd], axis=1)
    if not a_batch:
        out = out[0]

    def bwd(g, needs):
        g4 = g if a_batch else g[None]
        ga = g4[:, :c1] if needs[0] else None
        gb = g4[:, c1:] if needs[1] else None
        if not a_batch:
            ga = None if ga is None else ga[0]
            gb = None if gb is None else gb[0]
        return ga, gb

    return make_output("concat_channels", out, (a, b), bwd)


def reverse_seq(x: Tensor) -> Tensor:
    """Reverse the sequence axis of (L, E) or (N, L, E); an involution."""
    if x.ndim not in (2, 3):
        raise ShapeError(f"reverse_seq: expected (L, E) or (N, L, E), got {x.shape}")
    axis = x.ndim - 2
    out = np.flip(x.data, axis=axis).copy()

    def bwd(g, needs):
        return (np.flip(g, axis=axis).copy(),)

    return make_output("reverse_seq", out, (x,), bwd)
