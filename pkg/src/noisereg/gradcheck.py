"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad

#: Entries smaller than REL_FLOOR * max(1, largest |gradient| over all checked
#: tensors) are judged by absolute error against that floor, so float noise
#: on gradients that are exactly zero is not counted as a failure.
REL_FLOOR = 1e-6
#: Central differences cannot resolve gaps below this many ulps of f over
#: 2 * eps; that much of each discrepancy is forgiven.
ROUNDOFF_ULPS = 16


def numerical_gradient(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x.data`` in place."""
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f().item()
        flat[i] = orig - eps
        down = f().item()
        flat[i] = orig
        out.reshape(-1)[i] = (up - down) / (2 * eps)
    return out


def resolution(value: float, eps: float) -> float:
    """Derivative gap central differences at step ``eps`` cannot resolve for ``f = value``."""
    return ROUNDOFF_ULPS * float(np.spacing(abs(value))) / (2 * eps)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float | None = None,
                   resolution: float = 0.0) -> float:
    if not analytic.size:
        return 0.0
    if scale is None:
        scale = float(np.max(np.abs(analytic)))
    floor = REL_FLOOR * max(1.0, scale)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    gap = np.maximum(np.abs(analytic - numeric) - resolution, 0.0)
    return float(np.max(gap / denom))


def check_gradients(
    f: Callable[[], Tensor],
    x: Tensor | Sequence[Tensor],
    tol: float = 1e-4,
    eps: float = 1e-5,
) -> tuple[bool, float]:
    """Compare tape gradients of the scalar ``f()`` against central differences.

    ``f`` takes no arguments and must read the tensors in ``x``. Returns
    ``(max_rel_error < tol, max_rel_error)``; gaps within the differencing
    resolution of ``f`` do not count.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    flags = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
    try:
        out = f()
        res = resolution(out.item(), eps)
        analytic = grad(out, xs)
        scale = max(float(np.max(np.abs(a.data))) for a in analytic)
        worst = 0.0
        for t, a in zip(xs, analytic):
            worst = max(worst, relative_error(a.data, numerical_gradient(f, t, eps), scale, res))
    finally:
        for t, flag in zip(xs, flags):
            t.requires_grad = flag
    return worst < tol, worst
