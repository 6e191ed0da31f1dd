"""Complexity measures and norm-based generalization bounds for a network."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .jacobian import jacobian_sq_norms
from .nn import Network
from .regularizers import power_iteration

__all__ = [
    "ComplexityReport",
    "MarginError",
    "BOUND_NAMES",
    "REPORT_COLUMNS",
    "frobenius_sum",
    "darc1_norm",
    "lcnn_norm",
    "jacobian_norm",
    "margin_scores",
    "margin",
    "margin_loss",
    "table2_bounds",
    "full_report",
    "linf_norm",
    "l12_norm",
    "matrix_spectral_norm",
]

#: Percentile of correct-sample margin scores used as gamma.
MARGIN_PERCENTILE = 10.0
MARGIN_FLOOR = 1e-6
JACOBIAN_SUBSAMPLE = 2000

BOUND_NAMES = (
    "sontag_param_count",
    "bartlett_linf_product",
    "frobenius_product",
    "spectral_stable_rank",
    "neyshabur_fro_stable",
    "spec_bound_eq19",
)


class MarginError(ValueError):
    """A bound was requested with a non-positive margin."""


@dataclass
class ComplexityReport:
    frobenius_sum: float
    log2_frobenius_sum: float
    darc1_norm: float
    lcnn_norm: float
    jacobian_norm: float
    margin: float
    margin_loss: float
    bounds: dict[str, float] = field(default_factory=dict)
    eval_split: str = "test"

    def as_row(self) -> dict[str, float | str]:
        row = {k: v for k, v in asdict(self).items() if k != "bounds"}
        row.update(self.bounds)
        return row

    def metrics(self) -> dict[str, float]:
        """Numeric fields flattened into one mapping (bounds included)."""
        return {k: float(v) for k, v in self.as_row().items() if k != "eval_split"}


REPORT_COLUMNS = (
    "frobenius_sum", "log2_frobenius_sum", "darc1_norm", "lcnn_norm", "jacobian_norm",
    "margin", "margin_loss", *BOUND_NAMES, "eval_split",
)


# ---------------------------------------------------------------- matrix norms


def linf_norm(a: np.ndarray) -> float:
    """||A||_{1,inf}: the largest row L1 norm."""
    return float(np.max(np.sum(np.abs(a), axis=1)))


def l12_norm(a: np.ndarray) -> float:
    """||A||_{1,2}: the L2 norm of the vector of column L1 norms."""
    return float(np.linalg.norm(np.sum(np.abs(a), axis=0)))


def matrix_spectral_norm(a: np.ndarray, iters: int = 100) -> float:
    return power_iteration(a, iters=iters, rng=np.random.default_rng(0))[0]


# ---------------------------------------------------------------- measures


def _matrices(net: Network) -> list[np.ndarray]:
    return [w.data for _, w in net.parameter_matrices()]


def frobenius_sum(net: Network) -> float:
    """sum_i ||A^i||_F^2 over the network's weight matrices."""
    return float(sum(np.sum(a * a) for a in _matrices(net)))


def darc1_norm(net: Network, X: np.ndarray, logits: np.ndarray | None = None) -> float:
    """(1/m) max_k sum_i |f_k(x_i)| with Eval-mode logits."""
    z = net.logits(X) if logits is None else logits
    return float(np.max(np.abs(z).sum(axis=0)) / len(z))


def lcnn_norm(net: Network, X: np.ndarray, logits: np.ndarray | None = None) -> float:
    """(1/m) sum_i sum_k f_k(x_i)^2 with Eval-mode logits."""
    z = net.logits(X) if logits is None else logits
    return float(np.sum(z * z) / len(z))


def jacobian_norm(net: Network, X: np.ndarray, max_samples: int = JACOBIAN_SUBSAMPLE,
                  seed: int = 0) -> float:
    """(1/m) sum_i ||J(x_i)||_F^2; sets larger than ``max_samples`` use a seeded subsample."""
    X = np.asarray(X)
    if max_samples and len(X) > max_samples:
        idx = np.sort(np.random.default_rng(seed).choice(len(X), max_samples, replace=False))
        X = X[idx]
    return float(np.mean(jacobian_sq_norms(net, X)))


def margin_scores(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """o(s_i) = min_{j != y_i} sqrt(2) * (f_{y_i}(x_i) - f_j(x_i))."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    m = len(labels)
    true = logits[np.arange(m), labels]
    others = logits.copy()
    others[np.arange(m), labels] = -np.inf
    return math.sqrt(2.0) * (true - others.max(axis=1))


def margin(net: Network, X: np.ndarray, Y: np.ndarray, logits: np.ndarray | None = None,
           percentile: float = MARGIN_PERCENTILE) -> float:
    """gamma: a low percentile of margin scores over correctly classified samples, floored at 1e-6."""
    z = net.logits(X) if logits is None else logits
    return margin_from_scores(margin_scores(z, Y), percentile)


def margin_from_scores(scores: np.ndarray, percentile: float = MARGIN_PERCENTILE) -> float:
    correct = scores[scores > 0]
    if correct.size == 0:
        return MARGIN_FLOOR
    gamma = float(np.percentile(correct, percentile, method="lower"))
    return max(gamma, MARGIN_FLOOR)


def margin_loss(scores: np.ndarray, gamma: float) -> float:
    """Mean ramp loss: 0 above gamma, 1 - z/gamma on (0, gamma], 1 at or below 0."""
    if gamma <= 0:
        raise MarginError(f"margin must be positive, got {gamma}")
    z = np.asarray(scores, dtype=np.float64)
    return float(np.mean(np.clip(1.0 - z / gamma, 0.0, 1.0)))


# ---------------------------------------------------------------- bounds


def table2_bounds(matrices: Sequence[np.ndarray], gamma: float, param_count: int,
                  spectral_norms: Sequence[float] | None = None) -> dict[str, float]:
    """Every norm-based bound for weight matrices ``matrices`` at margin ``gamma``.

    ``h_i`` is taken as the row count (output width) of matrix i. Spectral
    norms come from 100-round power iteration unless supplied.
    """
    if gamma <= 0:
        raise MarginError(f"margin must be positive, got {gamma}")
    mats = [np.asarray(a, dtype=np.float64) for a in matrices]
    if not mats:
        raise ValueError("bounds need at least one weight matrix")
    if spectral_norms is None:
        spectral_norms = [matrix_spectral_norm(a) if np.any(a) else 0.0 for a in mats]
    spec_sq = np.array(spectral_norms, dtype=np.float64) ** 2
    fro_sq = np.array([np.sum(a * a) for a in mats])
    widths = np.array([a.shape[0] for a in mats], dtype=np.float64)
    with np.errstate(over="ignore"):
        inv_g2 = float(1.0 / np.square(np.float64(gamma)))
    prod_spec = float(np.prod(spec_sq))
    with np.errstate(divide="ignore", invalid="ignore"):
        stable_l12 = np.array([l12_norm(a) ** 2 for a in mats]) / spec_sq
        stable_fro = widths * fro_sq / spec_sq
    rho = float(param_count)
    return {
        "sontag_param_count": rho * math.log(rho) if rho > 0 else 0.0,
        "bartlett_linf_product": inv_g2 * float(np.prod([linf_norm(a) for a in mats])),
        "frobenius_product": inv_g2 * float(np.prod(fro_sq)),
        "spectral_stable_rank": inv_g2 * prod_spec * float(np.sum(stable_l12)),
        "neyshabur_fro_stable": inv_g2 * prod_spec * float(np.sum(stable_fro)),
        "spec_bound_eq19": inv_g2 * float(np.sum(widths * fro_sq)),
    }


def full_report(net: Network, X: np.ndarray, Y: np.ndarray, split: str = "test",
                jacobian_samples: int = JACOBIAN_SUBSAMPLE, seed: int = 0) -> ComplexityReport:
    """All measures and bounds for ``net`` evaluated on (X, Y)."""
    logits = net.logits(X)
    fro = frobenius_sum(net)
    scores = margin_scores(logits, Y)
    gamma = margin_from_scores(scores)
    bounds = table2_bounds(_matrices(net), gamma, net.param_count())
    return ComplexityReport(
        frobenius_sum=fro,
        log2_frobenius_sum=math.log2(fro) if fro > 0 else -math.inf,
        darc1_norm=darc1_norm(net, X, logits),
        lcnn_norm=lcnn_norm(net, X, logits),
        jacobian_norm=jacobian_norm(net, X, jacobian_samples, seed),
        margin=gamma,
        margin_loss=margin_loss(scores, gamma),
        bounds=bounds,
        eval_split=split,
    )
