"""Neural-network operations on :class:`~noisereg.tensor.Tensor`.

Convolution and training-mode batch normalization are fused numpy kernels
for speed. Their backward passes are still differentiable: the convolution
family is closed under differentiation (forward, input-gradient and
weight-gradient kernels are each other's adjoints), and batch norm falls
back to a composite of primitive ops when a second-order graph is requested.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    _make,
    as_tensor,
    grad,
    is_grad_enabled,
)

__all__ = [
    "relu",
    "linear",
    "conv1d",
    "batch_norm",
    "batch_norm_eval",
    "softmax",
    "log_softmax",
    "softmax_cross_entropy",
    "dropout",
    "LabelError",
]


class LabelError(ValueError):
    """A class label lies outside ``0..K-1``."""


def relu(x) -> Tensor:
    """max(0, x); the gradient is blocked where ``x <= 0``."""
    x = as_tensor(x)
    positive = x.data > 0

    def backward(g, needs):
        return (_gate(g, positive),)

    return _make(np.maximum(x.data, 0.0), (x,), backward, "relu")


def _gate(g: Tensor, mask: np.ndarray) -> Tensor:
    """g where ``mask`` holds, 0 elsewhere; linear in g, so it is its own derivative."""

    def backward(gg, needs):
        return (_gate(gg, mask),)

    return _make(g.data * mask, (g,), backward, "gate")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias with ``weight`` of shape (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x @ weight.T
    return out + bias if bias is not None else out


# ---------------------------------------------------------------- convolution
# Layout is (batch, channels, length). Kernels work channels-last internally;
# the transposed views they return keep that memory order, so a following
# convolution gets a contiguous channels-last array for free.


def _span(lout: int, stride: int) -> int:
    return (lout - 1) * stride + 1


def _windows(xl: np.ndarray, k: int, lout: int, stride: int) -> np.ndarray:
    """Read-only (batch, lout, k * channels) view of every receptive field of a channels-last array."""
    batch, length, channels = xl.shape
    if not xl.flags.c_contiguous:
        raise ValueError("receptive-field view needs a C-contiguous array")
    # Strides come from the shape: numpy may report arbitrary strides for size-1 axes.
    item = xl.itemsize
    return as_strided(xl, (batch, lout, k * channels),
                      (length * channels * item, stride * channels * item, item), writeable=False)


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    batch, in_ch, length = x.shape
    out_ch, _, k = w.shape
    lout = (length - k) // stride + 1
    xl = np.ascontiguousarray(x.transpose(0, 2, 1))
    cols = _windows(xl, k, lout, stride).reshape(batch * lout, k * in_ch)
    out = cols @ w.transpose(2, 1, 0).reshape(k * in_ch, out_ch)
    return out.reshape(batch, lout, out_ch).transpose(0, 2, 1)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, length: int, stride: int) -> np.ndarray:
    # Full correlation of the stride-dilated, zero-padded output gradient with the flipped kernel.
    batch, out_ch, lout = g.shape
    _, in_ch, k = w.shape
    gp = np.zeros((batch, length + k - 1, out_ch))
    gp[:, k - 1 : k - 1 + _span(lout, stride) : stride] = g.transpose(0, 2, 1)
    cols = _windows(gp, k, length, 1).reshape(batch * length, k * out_ch)
    wf = w[:, :, ::-1].transpose(2, 0, 1).reshape(k * out_ch, in_ch)
    return (cols @ wf).reshape(batch, length, in_ch).transpose(0, 2, 1)


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int, stride: int) -> np.ndarray:
    batch, in_ch, _ = x.shape
    _, out_ch, lout = g.shape
    xl = np.ascontiguousarray(x.transpose(0, 2, 1))
    cols = _windows(xl, k, lout, stride).reshape(batch * lout, k * in_ch)
    g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(batch * lout, out_ch)
    return (g2.T @ cols).reshape(out_ch, k, in_ch).transpose(0, 2, 1)


def conv1d(x, kernel, stride: int = 1, bias=None) -> Tensor:
    """Valid (unpadded) 1-D cross-correlation, plus an optional per-channel bias.

    ``x`` is (batch, in_ch, length) and ``kernel`` is (out_ch, in_ch, k);
    the result is (batch, out_ch, (length - k) // stride + 1).
    """
    if bias is not None:
        return _conv1d_bias(x, kernel, stride, as_tensor(bias))
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 3:
        raise DimensionError(f"conv1d expects 3-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1:
        raise DimensionError(f"conv1d stride must be positive, got {stride}")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv1d: input channels {x.shape} do not match kernel {kernel.shape}")
    if kernel.shape[2] > x.shape[2]:
        raise DimensionError(f"conv1d: kernel {kernel.shape} is longer than input {x.shape}")
    length, k = x.shape[2], kernel.shape[2]

    def backward(g, needs):
        gx = _conv1d_input_grad(g, kernel, length, stride) if needs[0] else None
        gw = _conv1d_weight_grad(x, g, k, stride) if needs[1] else None
        return gx, gw

    return _make(_conv_fwd(x.data, kernel.data, stride), (x, kernel), backward, "conv1d")


def _conv1d_bias(x, kernel, stride: int, bias: Tensor) -> Tensor:
    out = conv1d(x, kernel, stride)
    if bias.shape != (out.shape[1],):
        raise DimensionError(f"conv1d bias {bias.shape} does not match {out.shape[1]} output channels")
    # In place: no backward rule reads a convolution's own output.
    data = out.data
    data += bias.data[None, :, None]

    def backward(g, needs):
        gb = None
        if needs[1]:
            gb = g.sum(axis=(0, 2)) if is_grad_enabled() else Tensor(np.ones(g.shape[0] * g.shape[2]) @ _rows(g.data, 1))
        return (g if needs[0] else None), gb

    return _make(data, (out, bias), backward, "conv1d_bias")


def _conv1d_input_grad(g: Tensor, kernel: Tensor, length: int, stride: int) -> Tensor:
    k = kernel.shape[2]

    def backward(gg, needs):
        return (
            conv1d(gg, kernel, stride) if needs[0] else None,
            _conv1d_weight_grad(gg, g, k, stride) if needs[1] else None,
        )

    data = _conv_input_grad(g.data, kernel.data, length, stride)
    return _make(data, (g, kernel), backward, "conv1d_input_grad")


def _conv1d_weight_grad(x: Tensor, g: Tensor, k: int, stride: int) -> Tensor:
    length = x.shape[2]

    def backward(gw, needs):
        return (
            _conv1d_input_grad(g, gw, length, stride) if needs[0] else None,
            conv1d(x, gw, stride) if needs[1] else None,
        )

    return _make(_conv_weight_grad(x.data, g.data, k, stride), (x, g), backward, "conv1d_weight_grad")


# ---------------------------------------------------------------- batch norm


def _bn_composite(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple[int, ...], eps: float) -> Tensor:
    mu = x.mean(axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axes, keepdims=True)
    return xc * (var + eps) ** -0.5 * gamma + beta


def _rows(a: np.ndarray, channel_axis: int) -> np.ndarray:
    """(rows, channels) matrix of ``a``; a view when ``a`` is stored channels-last."""
    moved = np.moveaxis(a, channel_axis, -1)
    return moved.reshape(-1, moved.shape[-1])


def _unrows(a2: np.ndarray, shape: tuple[int, ...], channel_axis: int) -> np.ndarray:
    moved = list(shape)
    moved.append(moved.pop(channel_axis))
    return np.moveaxis(a2.reshape(moved), -1, channel_axis)


def batch_norm(
    x, gamma, beta, axes: tuple[int, ...], eps: float = 1e-5
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Training-mode batch normalization over ``axes``.

    ``gamma`` and ``beta`` must broadcast against ``x`` with size 1 on the
    reduced axes. Returns the output plus the batch mean and (biased)
    variance so the caller can update running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = tuple(sorted(a % x.ndim for a in axes))
    kept = [a for a in range(x.ndim) if a not in axes]
    if len(kept) != 1:
        out = _bn_composite(x, gamma, beta, axes, eps)
        mu = x.data.mean(axis=axes, keepdims=True)
        return out, mu, np.mean((x.data - mu) ** 2, axis=axes, keepdims=True)
    ch = kept[0]
    keep_shape = tuple(x.shape[a] if a == ch else 1 for a in range(x.ndim))

    # Work on a (rows, channels) matrix so every reduction is one BLAS call.
    xr = _rows(x.data, ch)
    count = xr.shape[0]
    ones = np.ones(count)
    mu = (ones @ xr) / count
    xhat = xr - mu
    var = np.einsum("ij,ij->j", xhat, xhat) / count
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    gvec, bvec = gamma.data.reshape(-1), beta.data.reshape(-1)
    out = xhat * gvec
    out += bvec

    def backward(g, needs):
        if is_grad_enabled():
            # Second-order graph requested: differentiate the composite form.
            ref = _bn_composite(x, gamma, beta, axes, eps)
            targets = [t for t, n in zip((x, gamma, beta), needs) if n]
            found = iter(grad(ref, targets, g, create_graph=True))
            return tuple(next(found) if n else None for n in needs)
        gr = _rows(g.data, ch)
        dbeta = ones @ gr
        dgamma = np.einsum("ij,ij->j", gr, xhat)
        gx = gg = gb = None
        if needs[0]:
            t = xhat * (dgamma / count)
            np.subtract(gr, t, out=t)
            t -= dbeta / count
            t *= gvec * inv
            gx = Tensor(_unrows(t, x.shape, ch))
        if needs[1]:
            gg = Tensor(dgamma.reshape(gamma.shape))
        if needs[2]:
            gb = Tensor(dbeta.reshape(beta.shape))
        return gx, gg, gb

    result = _make(_unrows(out, x.shape, ch), (x, gamma, beta), backward, "batch_norm")
    return result, mu.reshape(keep_shape), var.reshape(keep_shape)


def batch_norm_eval(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray, eps: float = 1e-5) -> Tensor:
    """Inference-mode batch normalization with fixed running statistics."""
    x = as_tensor(x)
    scale = as_tensor(gamma) * Tensor(1.0 / np.sqrt(running_var + eps))
    shift = as_tensor(beta) - scale * Tensor(running_mean)
    return x * scale + shift


# ---------------------------------------------------------------- softmax / CE


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z) -> Tensor:
    z = as_tensor(z)
    p = np.exp(_log_softmax_np(z.data))

    def backward(g, needs):
        return (out * (g - (g * out).sum(-1, keepdims=True)),)

    out = _make(p, (z,), backward, "softmax")
    return out


def log_softmax(z) -> Tensor:
    z = as_tensor(z)

    def backward(g, needs):
        return (g - softmax(z) * g.sum(-1, keepdims=True),)

    return _make(_log_softmax_np(z.data), (z,), backward, "log_softmax")


def _check_labels(labels, m: int, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (m,):
        raise DimensionError(f"expected {m} labels, got shape {labels.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= k) | (labels != np.floor(labels)))
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"label {labels[i]!r} at index {i} is outside 0..{k - 1}")
    return labels.astype(np.intp)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (m, K), got {logits.shape}")
    m, k = logits.shape
    y = _check_labels(labels, m, k)
    logp = _log_softmax_np(logits.data)
    loss = -logp[np.arange(m), y].mean()
    onehot = np.zeros((m, k))
    onehot[np.arange(m), y] = 1.0

    def backward(g, needs):
        if is_grad_enabled():
            return ((softmax(logits) - Tensor(onehot)) * (g / m),)
        return (Tensor((np.exp(logp) - onehot) * (g.data / m)),)

    return _make(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")


# ---------------------------------------------------------------- dropout


def dropout(x, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero each unit with probability ``p`` and scale survivors by 1/(1-p)."""
    if not 0.0 < p < 1.0:
        raise ContractError(f"dropout rate must lie in (0, 1), got {p}")
    x = as_tensor(x)
    if not training:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= p
    return x * Tensor(keep / (1.0 - p))
