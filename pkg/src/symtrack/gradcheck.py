"""Central finite-difference gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .tensor import Tensor, backward


class NondeterministicError(RuntimeError):
    """The checked function returned different values for identical inputs."""


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    worst_index: tuple
    passed: bool

    def as_dict(self) -> dict:
        return {
            "max_rel_err": self.max_rel_err,
            "max_abs_err": self.max_abs_err,
            "n_checked": self.n_checked,
            "worst_index": list(self.worst_index),
            "pass": self.passed,
        }


def relative_error(a, b, floor: float = 1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _scalar(out) -> float:
    if isinstance(out, Tensor):
        if out.size != 1:
            raise ValueError(f"checked function must return a scalar, got shape {out.shape}")
        return out.item()
    return float(out)


def finite_diff_check(
    f: Callable[..., Tensor],
    x: Union[Tensor, Sequence[Tensor]],
    eps: float = 1e-5,
    tol: float = 1e-4,
    analytic: Union[np.ndarray, Sequence[np.ndarray], None] = None,
    indices: Optional[Sequence[Optional[Sequence[int]]]] = None,
    stencil: int = 2,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` against central differences.

    ``x`` may be a single tensor (``f`` is called as ``f(x)``) or a list of
    tensors (``f`` is called with no arguments and must read them itself).
    ``analytic`` overrides the tape gradient, which is how negative controls
    feed in a deliberately wrong gradient. ``indices`` restricts the check to
    the given flat positions per tensor (None checks every position).

    ``stencil=2`` is (f(x+e) - f(x-e)) / 2e. ``stencil=4`` uses the
    fourth-order central formula (8(f(x+e) - f(x-e)) - (f(x+2e) - f(x-2e))) / 12e,
    whose truncation error is small enough to use a larger ``eps`` and so
    keep roundoff well below the 1e-8 relative-error floor.
    """
    if stencil not in (2, 4):
        raise ValueError(f"stencil must be 2 or 4, got {stencil}")
    single = isinstance(x, Tensor)
    params = [x] if single else list(x)
    call = (lambda: f(x)) if single else f

    for p in params:
        p.grad = None
    base = call()
    f0 = _scalar(base)
    if _scalar(call()) != f0:
        raise NondeterministicError("re-evaluating f at the same point gave a different value")

    if analytic is None:
        backward(base)
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    else:
        grads = [np.asarray(analytic)] if single else [np.asarray(a) for a in analytic]

    def at(flat, i, orig, h):
        flat[i] = orig + h
        return _scalar(call())

    worst_rel, worst_abs, worst_at, n = 0.0, 0.0, (), 0
    for k, p in enumerate(params):
        flat = p.data.flat
        g = grads[k].reshape(-1)
        positions = range(p.size) if indices is None or indices[k] is None else indices[k]
        for i in positions:
            orig = flat[i]
            d1 = at(flat, i, orig, eps) - at(flat, i, orig, -eps)
            if stencil == 2:
                num = d1 / (2 * eps)
            else:
                d2 = at(flat, i, orig, 2 * eps) - at(flat, i, orig, -2 * eps)
                num = (8 * d1 - d2) / (12 * eps)
            flat[i] = orig
            rel = float(relative_error(g[i], num))
            err = abs(float(g[i]) - num)
            n += 1
            if rel > worst_rel:
                worst_rel, worst_at = rel, (k, int(i))
            worst_abs = max(worst_abs, err)
    for p in params:
        p.grad = None
    return GradCheckReport(worst_rel, worst_abs, n, worst_at, worst_rel <= tol)
