"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array (float32 for training, float64 for
gradient verification).  Operations executed while a ``Tape`` is active
append backward closures to it; ``backward`` replays the tape in exact
reverse append order and accumulates gradients additively into every
leaf that has ``requires_grad`` set.

Shape discipline is strict: apart from the documented bias-add inside
``linear``/conv layers and the explicit ``expand`` op, operands must
have identical shapes.  Every forward op checks its output for
non-finite values and raises ``NumericsError`` instead of storing them.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericsError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

# Toggled via set_finite_checks(); on by default so the first op that
# produces a NaN/Inf is the one that raises.
_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> bool:
    """Enable/disable per-op output finiteness checks. Returns prior value."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return prev


class Tape:
    """Append-only record of executed ops for one forward pass.

    Use as a context manager; ops executed inside record themselves on
    the innermost active tape.  The tape is rebuilt for every forward
    pass (define-by-run), so node order is the execution order.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class _Node:
    """One recorded op: output ref, operand refs, and a backward closure.

    ``backward(g, needs)`` receives the upstream gradient of the output
    and a per-operand bool mask; it returns one gradient array (or None)
    per operand.
    """

    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op: str, out: "Tensor", inputs: Sequence["Tensor"],
                 backward: Callable) -> None:
        self.op = op
        self.out = out
        self.inputs = tuple(inputs)
        self.backward = backward


class Tensor:
    """n-dimensional value with optional gradient recording.

    Immutable after creation except for ``grad`` accumulation during
    ``backward``.  ``requires_grad`` marks trainable leaves; tensors
    produced by recorded ops carry ``_recorded=True`` so the backward
    pass knows to propagate through them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_recorded")

    def __init__(self, data, dtype=None, requires_grad: bool = False) -> None:
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._recorded = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def zero_grad(self) -> None:
        self.grad = None


def _check_same_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(map(str, dtypes))}")


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def make_output(op: str, data: np.ndarray, inputs: Sequence[Tensor],
                backward: Callable) -> Tensor:
    """Wrap an op result, check finiteness, and record on the active tape.

    ``backward(g, needs)`` must return one array-or-None per input.
    Recording happens only when a tape is active and some input takes
    part in differentiation.
    """
    if _FINITE_CHECKS and not np.isfinite(data).all():
        raise NumericsError(f"non-finite values in output of op '{op}'")
    out = Tensor(data, dtype=data.dtype)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad or t._recorded for t in inputs):
        out._recorded = True
        tape.nodes.append(_Node(op, out, inputs, backward))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf on the tape.

    The traversal visits nodes in exact reverse append order; fan-out
    contributions add.  Leaf ``grad`` accumulates across calls (callers
    zero it between optimizer steps).
    """
    if loss.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        needs = tuple(t.requires_grad or t._recorded for t in node.inputs)
        in_grads = node.backward(g, needs)
        for t, gi, need in zip(node.inputs, in_grads, needs):
            if gi is None or not need:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # persist into leaves
    seen: set[int] = set()
    for node in tape.nodes:
        for t in node.inputs:
            key = id(t)
            if t.requires_grad and not t._recorded and key in grads and key not in seen:
                seen.add(key)
                gi = np.ascontiguousarray(grads[key])
                t.grad = gi if t.grad is None else t.grad + gi
    if loss.requires_grad and not loss._recorded:
        g0 = np.ones((), dtype=loss.data.dtype)
        loss.grad = g0 if loss.grad is None else loss.grad + g0


# ----------------------------------------------------------------------
# elementwise ops
# ----------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(b)
        return make_output("add_scalar", a.data + c, (a,),
                           lambda g, needs: (g,))
    _check_same_shape("add", a, b)
    _check_same_dtype("add", a, b)
    return make_output("add", a.data + b.data, (a, b),
                       lambda g, needs: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -b)
    _check_same_shape("sub", a, b)
    _check_same_dtype("sub", a, b)
    return make_output("sub", a.data - b.data, (a, b),
                       lambda g, needs: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(b)
        return make_output("mul_scalar", a.data * c, (a,),
                           lambda g, needs: (g * c,))
    _check_same_shape("mul", a, b)
    _check_same_dtype("mul", a, b)
    ad, bd = a.data, b.data
    return make_output("mul", ad * bd, (a, b),
                       lambda g, needs: (g * bd if needs[0] else None,
                                         g * ad if needs[1] else None))


def neg(a: Tensor) -> Tensor:
    return make_output("neg", -a.data, (a,), lambda g, needs: (-g,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return make_output("exp", out, (a,), lambda g, needs: (g * out,))


def pow_scalar(a: Tensor, p: float) -> Tensor:
    p = float(p)
    ad = a.data
    with np.errstate(invalid="ignore"):
        out = ad ** p

    def bwd(g, needs):
        return (g * (p * ad ** (p - 1.0)),)

    return make_output("pow", out, (a,), bwd)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), the activation used throughout the network."""
    ad = a.data
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-ad))
    out = ad * sig

    def bwd(g, needs):
        return (g * (sig * (1.0 + ad * (1.0 - sig))),)

    return make_output("silu", out, (a,), bwd)


# ----------------------------------------------------------------------
# shape ops
# ----------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    in_shape = a.shape
    return make_output("reshape", a.data.reshape(shape), (a,),
                       lambda g, needs: (g.reshape(in_shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_output("transpose", np.ascontiguousarray(a.data.transpose(axes)),
                       (a,), lambda g, needs: (g.transpose(inv),))


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of ``a`` to ``shape`` (gradient sums back)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(f"expand: cannot broadcast {a.shape} to {shape}") from e
    in_shape = a.shape
    lead = len(shape) - len(in_shape)
    sum_axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(in_shape) if n == 1 and shape[lead + i] != 1)

    def bwd(g, needs):
        gi = g.sum(axis=sum_axes) if sum_axes else g
        return (gi.reshape(in_shape),)

    return make_output("expand", np.ascontiguousarray(out), (a,), bwd)


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    in_shape = a.shape
    return make_output("sum", np.asarray(a.data.sum()), (a,),
                       lambda g, needs: (np.broadcast_to(g, in_shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    in_shape = a.shape
    return make_output("mean", np.asarray(a.data.mean()), (a,),
                       lambda g, needs: (np.broadcast_to(g / n, in_shape).copy(),))


def mean_axes(a: Tensor, axes: Sequence[int]) -> Tensor:
    """Mean over the given axes (kept for none); used e.g. for global pooling."""
    axes = tuple(sorted(ax % a.ndim for ax in axes))
    in_shape = a.shape
    count = int(np.prod([in_shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes)

    def bwd(g, needs):
        ge = np.expand_dims(g, axes)
        return (np.broadcast_to(ge / count, in_shape).copy(),)

    return make_output("mean_axes", out, (a,), bwd)


# ----------------------------------------------------------------------
# linear / classification ops
# ----------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: y = x @ W.T + b.

    ``x`` is (..., F_in); ``weight`` is (F_out, F_in); ``bias`` (F_out,).
    """
    if weight.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-d, got {weight.shape}")
    f_out, f_in = weight.shape
    if x.shape[-1] != f_in:
        raise ShapeError(
            f"linear: input last extent {x.shape[-1]} != weight F_in {f_in}")
    if bias is not None and bias.shape != (f_out,):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({f_out},)")
    _check_same_dtype("linear", *([x, weight] + ([bias] if bias is not None else [])))

    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bwd(g, needs):
        g2 = g.reshape(-1, f_out)
        x2 = xd.reshape(-1, f_in)
        gx = (g @ wd) if needs[0] else None
        gw = (g2.T @ x2) if needs[1] else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if needs[2] else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output("linear", out, inputs, bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    z = xd - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bwd(g, needs):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_output("log_softmax", out, (x,), bwd)


def take_per_row(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather one element per row: out[b] = x[b, idx[b]] for x of shape (B, K)."""
    if x.ndim != 2:
        raise ShapeError(f"take_per_row: expected (B, K), got {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    b, k = x.shape
    if idx.shape != (b,):
        raise ShapeError(f"take_per_row: index shape {idx.shape} != ({b},)")
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= k:
        raise ShapeError(f"take_per_row: index out of range for {k} columns")
    rows = np.arange(b)
    out = x.data[rows, idx]

    def bwd(g, needs):
        gx = np.zeros((b, k), dtype=g.dtype)
        gx[rows, idx] = g
        return (gx,)

    return make_output("take_per_row", out, (x,), bwd)


def stack_rows(tensors: Iterable[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis (used for batching)."""
    ts = list(tensors)
    base = ts[0].shape
    for t in ts[1:]:
        if t.shape != base:
            raise ShapeError(f"stack_rows: shape mismatch {t.shape} vs {base}")
    out = np.stack([t.data for t in ts])

    def bwd(g, needs):
        return tuple(g[i] if needs[i] else None for i in range(len(ts)))

    return make_output("stack_rows", out, ts, bwd)
