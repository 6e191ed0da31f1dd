import numpy as np
import pytest

from noisereg.nn import BatchNorm, Dense, Network, ReLU


def small_mlp(d, hidden, k, seed=0, batchnorm=False):
    """Dense/ReLU stack with the given hidden widths."""
    rng = np.random.default_rng(seed)
    layers, fan = [], d
    for h in hidden:
        layers.append(Dense(fan, h, rng=rng))
        if batchnorm:
            layers.append(BatchNorm(h))
        layers.append(ReLU())
        fan = h
    layers.append(Dense(fan, k, rng=rng))
    return Network(layers, k, d)


def linear_net(W, b=None):
    W = np.asarray(W, dtype=float)
    layer = Dense(W.shape[1], W.shape[0])
    layer.weight.data = W.copy()
    if b is not None:
        layer.bias.data = np.asarray(b, dtype=float)
    return Network([layer], W.shape[0], W.shape[1])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
