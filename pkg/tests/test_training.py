import numpy as np
import pytest

from noisereg.complexity import matrix_spectral_norm
from noisereg.data import DatasetBundle, LabeledDataset
from noisereg.nn import build_shallow_convnet
from noisereg.regularizers import ConfigError, RegularizerConfig, Scheme
from noisereg.tensor import Tensor
from noisereg.training import (AdamState, DivergedError, TrainConfig, adam_step, build_network, evaluate,
                               grid_search, train)


def blobs(seed, m, d=8, k=3):
    r = np.random.default_rng(seed)
    centers = np.random.default_rng(99).normal(size=(k, d)) * 1.5
    Y = r.integers(0, k, m)
    return LabeledDataset(centers[Y] + r.normal(size=(m, d)), Y, num_classes=k)


@pytest.fixture(scope="module")
def bundle():
    return DatasetBundle(blobs(0, 160), blobs(1, 60), blobs(2, 60))


FAST = TrainConfig(epochs=3, batch_size=32, lr=3e-3, jacobian_samples=30)


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = adam_step([("p", p)], [np.zeros(2)], AdamState())
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_is_lr_sign():
    p = Tensor(np.zeros(3), requires_grad=True)
    adam_step([("p", p)], [np.array([0.5, -3.0, 1e-3])], AdamState(lr=0.01))
    np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_matches_reference_formula(rng):
    p0 = rng.normal(size=4)
    grads = [rng.normal(size=4) for _ in range(5)]
    p = Tensor(p0.copy(), requires_grad=True)
    state = AdamState(lr=0.1)
    m = v = np.zeros(4)
    ref = p0.copy()
    for i, g in enumerate(grads, 1):
        adam_step([("p", p)], [g], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.1 * (m / (1 - 0.9 ** i)) / (np.sqrt(v / (1 - 0.999 ** i)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step([("p", Tensor(np.zeros(2)))], [np.zeros(3)], AdamState())


# ---------------------------------------------------------------- config


@pytest.mark.parametrize("kwargs", [{"epochs": 0}, {"batch_size": 0}, {"lr": 0.0}, {"metric_split": "dev"}])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_build_network_unknown_arch():
    with pytest.raises(ConfigError):
        build_network("resnet", 8, 2, RegularizerConfig())


# ---------------------------------------------------------------- train


def run(bundle, scheme="none", lam=0.0, p=None, config=FAST, seed=0):
    reg = RegularizerConfig(scheme, lam, p)
    net = build_network("shallow", bundle.train.dim, bundle.train.num_classes, reg, seed)
    return net, train(net, bundle.train, bundle.val, reg, config, bundle.test)


def test_train_report_contents(bundle):
    net, rep = run(bundle)
    assert len(rep.epochs) == 3
    assert all(e.complexity is not None for e in rep.epochs)
    assert all(0 <= e.val_accuracy <= 1 for e in rep.epochs)
    assert rep.best_epoch == 1 + int(np.argmax([e.val_accuracy for e in rep.epochs]))
    assert 0 <= rep.test_accuracy <= 1
    assert rep.test_accuracy > 0.6  # separable blobs
    assert rep.final_complexity.eval_split == "test"
    assert rep.hyperparameters["scheme"] == "none"


def test_train_restores_best_weights(bundle):
    net, rep = run(bundle)
    acc, _ = evaluate(net, bundle.val)
    assert acc == rep.epochs[rep.best_epoch - 1].val_accuracy


def test_train_deterministic(bundle):
    a, ra = run(bundle, "dropout", p=0.3)
    b, rb = run(bundle, "dropout", p=0.3)
    for (n, x), (_, y) in zip(a.parameters(), b.parameters()):
        assert np.array_equal(x.data, y.data), n
    assert ra.final_metrics() == rb.final_metrics()


def test_report_every_zero_still_reports_final(bundle):
    cfg = TrainConfig(epochs=2, batch_size=32, report_every=0, jacobian_samples=20)
    _, rep = run(bundle, config=cfg)
    assert all(e.complexity is None for e in rep.epochs)
    assert rep.final_complexity is not None


def test_metric_split_must_be_supplied(bundle):
    reg = RegularizerConfig()
    net = build_network("shallow", 8, 3, reg)
    with pytest.raises(ConfigError):
        train(net, bundle.train, bundle.val, reg, FAST, test_set=None)


def test_l2_shrinks_weights(bundle):
    _, none = run(bundle)
    _, l2 = run(bundle, "l2", 1e-1)
    assert l2.final_complexity.frobenius_sum < none.final_complexity.frobenius_sum


def test_spectral_sigmas_near_one(bundle):
    net, rep = run(bundle, "spectral")
    for _, w in net.parameter_matrices():
        assert 0.95 <= np.linalg.svd(w.data, compute_uv=False)[0] <= 1.05


@pytest.mark.parametrize("scheme,lam", [("darc1", 1e-2), ("lcnn", 1e-2), ("jacobian", 1e-2)])
def test_penalty_schemes_train(bundle, scheme, lam):
    _, rep = run(bundle, scheme, lam, config=TrainConfig(epochs=1, batch_size=32, jacobian_samples=20))
    assert rep.epochs[0].train_penalty > 0


def test_deep_architecture_trains(bundle):
    reg = RegularizerConfig()
    net = build_network("deep", 8, 3, reg)
    rep = train(net, bundle.train, bundle.val, reg, TrainConfig(epochs=1, batch_size=32, jacobian_samples=20),
                bundle.test)
    assert rep.test_accuracy is not None


def test_divergence_is_reported(bundle, monkeypatch):
    import noisereg.training as tr

    real, calls = tr.loss_terms, []

    def poisoned(*a, **k):
        total, ce, pen, logits = real(*a, **k)
        calls.append(1)
        if len(calls) == 7:  # second batch of epoch 2
            total = total * Tensor(np.nan)
        return total, ce, pen, logits

    monkeypatch.setattr(tr, "loss_terms", poisoned)
    with pytest.raises(DivergedError) as info:
        run(bundle, config=TrainConfig(epochs=3, batch_size=32, report_every=0, jacobian_samples=10))
    assert (info.value.epoch, info.value.batch) == (2, 1)


def test_grid_search_picks_best_and_breaks_ties(bundle, monkeypatch):
    res = grid_search(bundle, "l2", [1e-3, 1e-1], TrainConfig(epochs=1, batch_size=32, jacobian_samples=10))
    assert set(res.reports) == {1e-3, 1e-1}
    best = max(max(e.val_accuracy for e in r.epochs) for r in res.reports.values())
    assert max(e.val_accuracy for e in res.best_report.epochs) == best
    with pytest.raises(ConfigError):
        grid_search(bundle, "spectral")


def test_grid_search_tie_goes_to_smaller(bundle, monkeypatch):
    import noisereg.training as tr

    real = tr.train

    def flat(*a, **k):
        rep = real(*a, **k)
        for e in rep.epochs:
            e.val_accuracy = 0.5
        return rep

    monkeypatch.setattr(tr, "train", flat)
    res = grid_search(bundle, "dropout", [0.8, 0.2, 0.4], TrainConfig(epochs=1, batch_size=64, report_every=0,
                                                                       jacobian_samples=10))
    assert res.best_value == 0.2
