"""Regularization schemes: additive penalties and structural transforms.

L2, DARC1, LCNN and Jacobian add a penalty to the cross-entropy loss.
Spectral normalization rescales each weight matrix by a power-iteration
estimate of its largest singular value; dropout masks hidden units.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np

from . import functional as F
from .jacobian import jacobian_rows
from .nn import Mode, Network, _WeightLayer
from .tensor import ContractError, Tensor, as_tensor

__all__ = [
    "Scheme",
    "RegularizerConfig",
    "ConfigError",
    "SpectralError",
    "l2_penalty",
    "darc1_penalty",
    "lcnn_penalty",
    "jacobian_penalty",
    "power_iteration",
    "spectral_norm",
    "spectral_normalize_step",
    "apply_dropout_mask",
    "composite_loss",
    "loss_terms",
]


class ConfigError(ValueError):
    """Invalid regularizer or experiment configuration."""


class SpectralError(ArithmeticError):
    """The largest singular value is undefined (zero matrix)."""


class Scheme(str, enum.Enum):
    NONE = "none"
    L2 = "l2"
    DARC1 = "darc1"
    LCNN = "lcnn"
    JACOBIAN = "jacobian"
    SPECTRAL = "spectral"
    DROPOUT = "dropout"

    @classmethod
    def parse(cls, value: "str | Scheme") -> "Scheme":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        aliases = {"noreg": "none", "spectralnorm": "spectral", "sn": "spectral", "weightdecay": "l2"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            names = ", ".join(s.value for s in cls)
            raise ConfigError(f"unknown regularization scheme {value!r} (choose from {names})") from None

    @property
    def uses_lambda(self) -> bool:
        return self in (Scheme.L2, Scheme.DARC1, Scheme.LCNN, Scheme.JACOBIAN)


@dataclass(frozen=True)
class RegularizerConfig:
    scheme: Scheme = Scheme.NONE
    lam: float = 0.0
    dropout_rate: float | None = None
    #: "all" sums squared logits over every class; "max" takes the largest per-class sum.
    lcnn_reduction: str = "all"

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme.parse(self.scheme))
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if self.scheme is Scheme.DROPOUT:
            if self.dropout_rate is None or not 0.0 < self.dropout_rate < 1.0:
                raise ConfigError(f"dropout rate must lie in (0, 1), got {self.dropout_rate}")
        if self.lcnn_reduction not in ("all", "max"):
            raise ConfigError(f"lcnn_reduction must be 'all' or 'max', got {self.lcnn_reduction!r}")

    @property
    def hyperparameter(self) -> float | None:
        if self.scheme is Scheme.DROPOUT:
            return self.dropout_rate
        return self.lam if self.scheme.uses_lambda else None

    def with_value(self, value: float) -> "RegularizerConfig":
        if self.scheme is Scheme.DROPOUT:
            return RegularizerConfig(self.scheme, self.lam, value, self.lcnn_reduction)
        return RegularizerConfig(self.scheme, value, self.dropout_rate, self.lcnn_reduction)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scheme"] = self.scheme.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RegularizerConfig":
        return cls(d.get("scheme", "none"), float(d.get("lam", d.get("lambda", 0.0))),
                   d.get("dropout_rate"), d.get("lcnn_reduction", "all"))


# ---------------------------------------------------------------- penalties


def l2_penalty(net: Network) -> Tensor:
    """Sum of squared Frobenius norms of the network's weight matrices."""
    total = Tensor(0.0)
    for _, w in net.parameter_matrices():
        total = total + (w * w).sum()
    return total


def darc1_penalty(logits, lam: float) -> Tensor:
    """(lam / m) * max_k sum_i |logits[i, k]|."""
    logits = as_tensor(logits)
    m = logits.shape[0]
    return logits.abs().sum(axis=0).max(axis=0) * (lam / m)


def lcnn_penalty(logits, lam: float, reduction: str = "all") -> Tensor:
    """(lam / m) * sum_i sum_k logits[i, k]^2, or the largest per-class sum with ``reduction="max"``."""
    logits = as_tensor(logits)
    m = logits.shape[0]
    sq = logits * logits
    if reduction == "all":
        return sq.sum() * (lam / m)
    if reduction == "max":
        return sq.sum(axis=0).max(axis=0) * (lam / m)
    raise ConfigError(f"unknown LCNN reduction {reduction!r}")


def _jacobian_term(x: Tensor, logits: Tensor, lam: float) -> Tensor:
    m = x.shape[0]
    total = Tensor(0.0)
    for row in jacobian_rows(x, logits, create_graph=True):
        total = total + (row * row).sum()
    return total * (lam / m)


def jacobian_penalty(net: Network, batch, lam: float, mode: Mode = Mode.EVAL,
                     rng: np.random.Generator | None = None) -> Tensor:
    """lam * (1/m) * sum_i ||J(x_i)||_F^2, differentiable with respect to the weights."""
    x = Tensor(as_tensor(batch).data, requires_grad=True)
    logits = net.forward(x, mode, rng).logits
    return _jacobian_term(x, logits, lam)


# ---------------------------------------------------------------- spectral


def power_iteration(w: np.ndarray, u: np.ndarray | None = None, iters: int = 100,
                    rng: np.random.Generator | None = None) -> tuple[float, np.ndarray, np.ndarray]:
    """Estimate the top singular triple of ``w`` (rows x cols).

    Each round does v <- W^T u / ||W^T u||, then u <- W v / ||W v||. Returns
    ``(sigma, u, v)`` with sigma = u^T W v.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ContractError(f"power iteration needs a matrix, got shape {w.shape}")
    if not np.any(w):
        raise SpectralError("largest singular value of a zero matrix is undefined")
    rng = rng or np.random.default_rng(0)
    if u is None:
        u = rng.standard_normal(w.shape[0])
    u = u / np.linalg.norm(u)
    v = np.zeros(w.shape[1])
    for _ in range(max(iters, 1)):
        wu = w.T @ u
        norm = np.linalg.norm(wu)
        if norm == 0.0:
            # u is orthogonal to the column space; restart from a fresh direction
            u = rng.standard_normal(w.shape[0])
            u /= np.linalg.norm(u)
            wu = w.T @ u
            norm = np.linalg.norm(wu)
        v = wu / norm
        wv = w @ v
        u = wv / np.linalg.norm(wv)
    return float(u @ w @ v), u, v


def spectral_norm(w: np.ndarray, iters: int = 100, seed: int = 0) -> float:
    """Largest singular value of ``w`` by power iteration."""
    return power_iteration(w, iters=iters, rng=np.random.default_rng(seed))[0]


def spectral_normalize_step(layer: _WeightLayer, iters: int = 1) -> float:
    """Advance the layer's persistent (u, v) by ``iters`` rounds and return the new sigma.

    Afterwards the layer's forward pass uses W / (u^T W v).
    """
    if layer.spectral is None:
        raise ContractError(f"{layer!r} has no spectral state")
    w = layer.matrix().data
    sigma, u, v = power_iteration(w, layer.spectral.u, iters)
    layer.spectral.u, layer.spectral.v, layer.spectral.sigma = u, v, sigma
    return sigma


# ---------------------------------------------------------------- dropout


def apply_dropout_mask(x, p: float, mode: Mode, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout in Train mode (scale 1/(1-p)); identity in Eval mode."""
    if not 0.0 < p < 1.0:
        raise ConfigError(f"dropout rate must lie in (0, 1), got {p}")
    return F.dropout(x, p, Mode(mode) is Mode.TRAIN, rng)


# ---------------------------------------------------------------- total loss


def loss_terms(net: Network, batch, labels, config: RegularizerConfig,
               rng: np.random.Generator | None = None,
               mode: Mode = Mode.TRAIN) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """One forward pass; returns ``(total, cross_entropy, penalty, logits)``."""
    batch = as_tensor(batch)
    scheme = config.scheme
    if scheme is Scheme.JACOBIAN:
        x = Tensor(batch.data, requires_grad=True)
    else:
        x = batch
    logits = net.forward(x, mode, rng).logits
    ce = F.softmax_cross_entropy(logits, labels)
    if scheme is Scheme.L2:
        penalty = l2_penalty(net) * config.lam
    elif scheme is Scheme.DARC1:
        penalty = darc1_penalty(logits, config.lam)
    elif scheme is Scheme.LCNN:
        penalty = lcnn_penalty(logits, config.lam, config.lcnn_reduction)
    elif scheme is Scheme.JACOBIAN:
        penalty = _jacobian_term(x, logits, config.lam)
    else:
        penalty = Tensor(0.0)
    return ce + penalty, ce, penalty, logits


def composite_loss(net: Network, batch, labels, config: RegularizerConfig,
                   rng: np.random.Generator | None = None, mode: Mode = Mode.TRAIN) -> Tensor:
    """Cross-entropy plus the configured penalty (none for spectral norm and dropout)."""
    return loss_terms(net, batch, labels, config, rng, mode)[0]
