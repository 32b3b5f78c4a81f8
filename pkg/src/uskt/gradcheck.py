"""Finite-difference verification of recorded gradients.

``grad_check`` compares the gradients produced by one taped backward
pass against central differences of the same scalar function, element
by element, in 64-bit precision.  It is the oracle the whole tensor
core is tested against and deliberately shares no code with the
backward implementations it checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError
from .tensor import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    n_checked: int
    passed: bool

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"{self.name:<28s} rel_err={self.max_rel_err:.3e}  n={self.n_checked:<6d} {status}"


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(1e-8, abs(a) + abs(b))


def grad_check(fn: Callable[[], Tensor], leaves: Sequence[Tensor],
               eps: float = 1e-5, tol: float = 1e-4,
               name: str = "grad_check") -> GradCheckReport:
    """Verify d(fn)/d(leaf) for every element of every leaf.

    ``fn`` must rebuild its graph from the current leaf values on every
    call and return a scalar Tensor.  Leaves must be float64; central
    differences are not trustworthy in float32.
    """
    for leaf in leaves:
        if leaf.dtype != np.float64:
            raise ShapeError(f"{name}: grad_check requires float64 leaves, got {leaf.dtype}")
        if not leaf.requires_grad:
            raise ShapeError(f"{name}: all supplied leaves must have requires_grad")
        leaf.zero_grad()

    with Tape() as tape:
        loss = fn()
    if loss.shape != ():
        raise ShapeError(f"{name}: fn must return a scalar, got shape {loss.shape}")
    backward(loss, tape)

    max_err = 0.0
    n_checked = 0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            f_plus = fn().item()
            flat[i] = keep - eps
            f_minus = fn().item()
            flat[i] = keep
            numeric = (f_plus - f_minus) / (2.0 * eps)
            max_err = max(max_err, _rel_err(a_flat[i], numeric))
            n_checked += 1

    return GradCheckReport(name=name, max_rel_err=max_err,
                           n_checked=n_checked, passed=max_err < tol)
