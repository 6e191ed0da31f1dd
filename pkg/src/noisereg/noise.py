"""Class-conditional Gaussian input noise.

Every sample of class j gets ``t * eta_j * z`` added, where ``eta_j`` is the
per-feature standard deviation of class j and ``z`` is standard normal.
Noise is drawn from a Philox counter-based generator keyed by
``(seed, stream..., class)``, so a noisy set depends only on the data and
those integers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import LabeledDataset
from .regularizers import ConfigError

__all__ = [
    "NoiseConfig",
    "DegenerateClassError",
    "DegenerateClassWarning",
    "SHALLOW_LEVELS",
    "DEEP_LEVELS",
    "per_class_std",
    "class_generator",
    "inject_noise",
    "noise_sweep",
]

#: Noise factors of the shallow-network study.
SHALLOW_LEVELS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2)
#: Noise factors discussed for the deeper network.
DEEP_LEVELS = (0.0, 2.0, 4.0, 6.0, 8.0)


class DegenerateClassError(ValueError):
    """A class has fewer than two samples, so its spread is undefined."""


class DegenerateClassWarning(UserWarning):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    t: float = 0.0
    seed: int = 0
    #: Extra key words mixed into the generator seed (noise_sweep uses the level index).
    stream: tuple[int, ...] = ()
    #: Standard-deviation divisor offset: 0 divides by m_j, 1 by m_j - 1.
    ddof: int = 0

    def __post_init__(self):
        if not self.t >= 0:
            raise ConfigError(f"noise factor t must be nonnegative, got {self.t}")
        if self.ddof not in (0, 1):
            raise ConfigError(f"ddof must be 0 or 1, got {self.ddof}")
        object.__setattr__(self, "stream", tuple(int(s) for s in self.stream))


def per_class_std(X: np.ndarray, Y: np.ndarray, j: int, ddof: int = 0) -> np.ndarray:
    """Per-feature standard deviation of the rows of class ``j`` (divisor m_j by default)."""
    rows = np.asarray(X)[np.asarray(Y) == j]
    if len(rows) < 2:
        raise DegenerateClassError(f"class {j} has {len(rows)} sample(s); at least 2 are needed")
    return rows.std(axis=0, ddof=ddof)


def class_generator(seed: int, j: int, stream: Sequence[int] = ()) -> np.random.Generator:
    """The Philox generator that supplies noise for class ``j``."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(*map(int, stream), int(j)))
    return np.random.Generator(np.random.Philox(seq))


def inject_noise(data: LabeledDataset, config: NoiseConfig) -> LabeledDataset:
    """Return ``data`` with class-conditional noise of factor ``config.t`` added.

    Labels and row order are unchanged. Classes with fewer than two samples
    get no noise (with a warning). Intended for the training split only.
    """
    if config.t == 0:
        return data
    X = data.X.copy()
    for j in np.unique(data.Y):
        idx = np.flatnonzero(data.Y == j)
        try:
            eta = per_class_std(data.X, data.Y, j, config.ddof)
        except DegenerateClassError as exc:
            warnings.warn(f"{exc}; its noise scale is set to 0", DegenerateClassWarning, stacklevel=2)
            continue
        z = class_generator(config.seed, j, config.stream).standard_normal((len(idx), data.dim))
        X[idx] += config.t * eta * z
    return data.with_features(X)


def noise_sweep(data: LabeledDataset, levels: Iterable[float], seed: int = 0,
                ddof: int = 0) -> list[tuple[float, LabeledDataset]]:
    """One noisy copy of ``data`` per level, seeded by ``(seed, level index)``."""
    return [(float(t), inject_noise(data, NoiseConfig(float(t), seed, (i,), ddof)))
            for i, t in enumerate(levels)]
