"""Adam, the training loop with per-epoch complexity reports, and grid search."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .complexity import ComplexityReport, full_report
from .data import DatasetBundle, LabeledDataset
from .nn import Mode, Network, build_deep_mlp_standin, build_shallow_convnet
from .regularizers import ConfigError, RegularizerConfig, Scheme, loss_terms, spectral_normalize_step
from .tensor import NonFiniteError, Tensor, no_grad

__all__ = [
    "AdamState",
    "adam_step",
    "TrainConfig",
    "EpochRecord",
    "TrainReport",
    "DivergedError",
    "train",
    "evaluate",
    "build_network",
    "grid_search",
    "GridResult",
    "LAMBDA_GRID",
    "DROPOUT_GRID",
]

LAMBDA_GRID = (1e-4, 1e-3, 1e-2, 1e-1)
DROPOUT_GRID = (0.2, 0.4, 0.6, 0.8)


class DivergedError(FloatingPointError):
    """The loss became NaN or infinite."""

    def __init__(self, epoch: int, batch: int, detail: str = ""):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}{': ' + detail if detail else ''}")


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[tuple[str, Tensor]], grads: Sequence[np.ndarray | None],
              state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    A missing gradient counts as zero.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for (name, p), g in zip(params, grads):
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        # m <- b1 m + (1 - b1) g ;  v <- b2 v + (1 - b2) g^2, using one scratch array
        tmp = np.multiply(g, 1.0 - b1)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        # p <- p - lr * (m / c1) / (sqrt(v / c2) + eps)
        np.multiply(v, 1.0 / c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= state.lr / c1
        p.data -= tmp
    return state


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    #: Which split the per-epoch complexity report is computed on ("test", "val" or "train").
    metric_split: str = "test"
    #: Compute the complexity report every this many epochs (and always after the last).
    report_every: int = 1
    jacobian_samples: int = 2000
    spectral_iters: int = 1
    restore_best: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.metric_split not in ("train", "val", "test"):
            raise ConfigError(f"metric split must be train, val or test, got {self.metric_split!r}")
        if self.report_every < 0:
            raise ConfigError("report_every must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_penalty: float
    val_accuracy: float
    val_loss: float
    complexity: ComplexityReport | None = None

    def metrics(self) -> dict[str, float]:
        out = {"train_loss": self.train_loss, "train_penalty": self.train_penalty,
               "val_accuracy": self.val_accuracy, "val_loss": self.val_loss}
        if self.complexity is not None:
            out.update(self.complexity.metrics())
        return out


@dataclass
class TrainReport:
    epochs: list[EpochRecord]
    best_epoch: int
    test_accuracy: float | None
    test_loss: float | None
    final_complexity: ComplexityReport | None
    wall_time: float
    hyperparameters: dict

    def final_metrics(self) -> dict[str, float]:
        out = {"best_epoch": float(self.best_epoch), "best_val_accuracy": self.epochs[self.best_epoch - 1].val_accuracy}
        if self.test_accuracy is not None:
            out["test_accuracy"] = self.test_accuracy
            out["test_loss"] = self.test_loss
        if self.final_complexity is not None:
            out.update(self.final_complexity.metrics())
        return out


def evaluate(net: Network, data: LabeledDataset) -> tuple[float, float]:
    """Eval-mode ``(accuracy, mean cross-entropy)``."""
    logits = net.logits(data.X)
    acc = float(np.mean(np.argmax(logits, axis=1) == data.Y))
    with no_grad():
        loss = F.softmax_cross_entropy(Tensor(logits), data.Y).item()
    return acc, loss


def _spectral_layers(net: Network, seed: int):
    layers = [layer for _, layer in net.weight_layers()]
    rng = np.random.default_rng([seed, 7])
    for layer in layers:
        if layer.spectral is None:
            layer.enable_spectral(rng)
    return layers


def train(net: Network, train_set: LabeledDataset, val_set: LabeledDataset,
          reg: RegularizerConfig, config: TrainConfig = TrainConfig(),
          test_set: LabeledDataset | None = None,
          log: Callable[[str], None] | None = None) -> TrainReport:
    """Train ``net`` in place with Adam and return the per-epoch history.

    The weights with the best validation accuracy (earliest on ties) are
    restored at the end. Raises DivergedError if the loss stops being finite.
    """
    start = time.perf_counter()
    splits = {"train": train_set, "val": val_set, "test": test_set}
    metric_data = splits[config.metric_split]
    if metric_data is None:
        raise ConfigError(f"metric split {config.metric_split!r} was not supplied")
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    order_rng = np.random.default_rng(seeds[0])
    drop_rng = np.random.default_rng(seeds[1])
    spectral = _spectral_layers(net, config.seed) if reg.scheme is Scheme.SPECTRAL else []
    params = net.parameters()
    adam = AdamState(config.lr, config.beta1, config.beta2, config.eps)
    m = len(train_set)
    history: list[EpochRecord] = []
    best_acc, best_epoch, best_state = -1.0, 0, None

    for epoch in range(1, config.epochs + 1):
        perm = order_rng.permutation(m)
        loss_sum = pen_sum = 0.0
        for b, lo in enumerate(range(0, m, config.batch_size)):
            idx = perm[lo:lo + config.batch_size]
            for layer in spectral:
                spectral_normalize_step(layer, config.spectral_iters)
            net.zero_grad()
            try:
                total, _, penalty, _ = loss_terms(net, train_set.X[idx], train_set.Y[idx], reg, drop_rng, Mode.TRAIN)
                value = total.item()
                if not math.isfinite(value):
                    raise DivergedError(epoch, b, f"loss {value}")
                total.backward()
            except NonFiniteError as exc:
                raise DivergedError(epoch, b, str(exc)) from None
            adam_step(params, [p.grad for _, p in params], adam)
            loss_sum += value * len(idx)
            pen_sum += penalty.item() * len(idx)
        bad = [name for name, p in params if not np.isfinite(p.data.sum())]
        if bad:
            raise DivergedError(epoch, b, f"non-finite parameters {bad}")
        val_acc, val_loss = evaluate(net, val_set)
        report = None
        if config.report_every and (epoch % config.report_every == 0 or epoch == config.epochs):
            report = full_report(net, metric_data.X, metric_data.Y, config.metric_split,
                                 config.jacobian_samples, config.seed)
        history.append(EpochRecord(epoch, loss_sum / m, pen_sum / m, val_acc, val_loss, report))
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_state = net.state_dict() if config.restore_best else None
        if log:
            log(f"epoch {epoch:3d}  loss {loss_sum / m:.4f}  val_acc {val_acc:.4f}")

    if best_state is not None:
        net.load_state_dict(best_state)
    test_acc = test_loss = None
    if test_set is not None:
        test_acc, test_loss = evaluate(net, test_set)
    final = full_report(net, metric_data.X, metric_data.Y, config.metric_split,
                        config.jacobian_samples, config.seed)
    hyper = {"scheme": reg.scheme.value, "hyperparameter": reg.hyperparameter, **asdict(config)}
    return TrainReport(history, best_epoch, test_acc, test_loss, final,
                       time.perf_counter() - start, hyper)


def build_network(arch: str, d: int, num_classes: int, reg: RegularizerConfig, seed: int = 0) -> Network:
    """The network for ``arch`` ("shallow" or "deep") wired for ``reg``."""
    rate = reg.dropout_rate if reg.scheme is Scheme.DROPOUT else None
    spectral = reg.scheme is Scheme.SPECTRAL
    if arch in ("shallow", "shallow_convnet"):
        return build_shallow_convnet(d, num_classes, rate, spectral, seed)
    if arch in ("deep", "deep_mlp"):
        return build_deep_mlp_standin(d, num_classes, dropout_rate=rate, spectral=spectral, seed=seed)
    raise ConfigError(f"unknown architecture {arch!r} (choose shallow or deep)")


# ---------------------------------------------------------------- grid search


@dataclass
class GridResult:
    best_value: float
    best_report: TrainReport
    reports: dict[float, TrainReport]


def grid_search(bundle: DatasetBundle, scheme: Scheme | str, grid: Sequence[float] | None = None,
                config: TrainConfig = TrainConfig(), arch: str = "shallow") -> GridResult:
    """Train once per grid value and keep the one with the best validation accuracy.

    Ties go to the smaller value (the simpler model).
    """
    scheme = Scheme.parse(scheme)
    if scheme not in (Scheme.L2, Scheme.DARC1, Scheme.LCNN, Scheme.JACOBIAN, Scheme.DROPOUT):
        raise ConfigError(f"scheme {scheme.value} has no hyperparameter to tune")
    if grid is None:
        grid = DROPOUT_GRID if scheme is Scheme.DROPOUT else LAMBDA_GRID
    if not grid:
        raise ConfigError("empty hyperparameter grid")
    reports: dict[float, TrainReport] = {}
    for value in sorted(set(float(v) for v in grid)):
        reg = (RegularizerConfig(scheme, dropout_rate=value) if scheme is Scheme.DROPOUT
               else RegularizerConfig(scheme, value))
        net = build_network(arch, bundle.train.dim, bundle.train.num_classes, reg, config.seed)
        reports[value] = train(net, bundle.train, bundle.val, reg, config, bundle.test)
    best = max(reports, key=lambda v: (max(e.val_accuracy for e in reports[v].epochs), -v))
    return GridResult(best, reports[best], reports)
