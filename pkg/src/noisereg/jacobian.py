"""Input-output Jacobians of a network, one backward pass per logit."""

from __future__ import annotations

import numpy as np

from .nn import Mode, Network
from .tensor import DimensionError, Tensor, as_tensor, grad


def jacobian_rows(x: Tensor, logits: Tensor, create_graph: bool = False) -> list[Tensor]:
    """Row k is d(sum_i logits[i, k]) / d x, an (m, d) tensor.

    When the forward pass treats samples independently (Eval mode, or no
    BatchNorm) row k restricted to sample i is exactly the gradient of
    logit k of sample i with respect to that sample's input.
    """
    return [grad(logits[:, k].sum(), [x], create_graph=create_graph)[0]
            for k in range(logits.shape[1])]


def input_jacobian(net: Network, x, mode: Mode = Mode.EVAL) -> Tensor:
    """The K x d Jacobian of the logits at a single input ``x`` of shape (1, d)."""
    x = as_tensor(x)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[0] != 1:
        raise DimensionError(f"input_jacobian takes one sample, got shape {x.shape}")
    xt = Tensor(x.data, requires_grad=True)
    logits = net.forward(xt, mode).logits
    return Tensor(np.concatenate([r.data for r in jacobian_rows(xt, logits)], axis=0))


def jacobian_sq_norms(net: Network, X: np.ndarray, chunk: int = 250) -> np.ndarray:
    """Per-sample squared Frobenius norms ||J(x_i)||_F^2 in Eval mode."""
    X = np.asarray(X, dtype=np.float64)
    out = np.zeros(len(X))
    for start in range(0, len(X), chunk):
        xt = Tensor(X[start:start + chunk], requires_grad=True)
        logits = net.forward(xt, Mode.EVAL).logits
        for row in jacobian_rows(xt, logits):
            out[start:start + chunk] += np.sum(row.data ** 2, axis=1)
    return out
