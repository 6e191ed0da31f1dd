"""Tape autodiff on a small net, checked against central differences.

Run: python demos/01_autodiff.py
"""

import numpy as np

from noisereg import Mode, RegularizerConfig, check_gradients, composite_loss
from noisereg.nn import BatchNorm, Dense, Network, ReLU

rng = np.random.default_rng(0)
net = Network([Dense(6, 8, rng=rng), BatchNorm(8), ReLU(), Dense(8, 3, rng=rng)], num_classes=3, input_dim=6)
X, Y = rng.normal(size=(16, 6)), rng.integers(0, 3, 16)
weights = [p for _, p in net.parameters()]

for scheme, lam in [("none", 0.0), ("l2", 1e-2), ("darc1", 1e-2), ("lcnn", 1e-2), ("jacobian", 1e-2)]:
    cfg = RegularizerConfig(scheme, lam)
    f = lambda: composite_loss(net, X, Y, cfg, np.random.default_rng(1), Mode.TRAIN)
    ok, err = check_gradients(f, weights, tol=1e-4)
    print(f"{scheme:9s} loss {f().item():.5f}  rel err beyond differencing resolution {err:.2e}  {'ok' if ok else 'MISMATCH'}")
