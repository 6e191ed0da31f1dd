import numpy as np
import pytest

from conftest import linear_net, small_mlp
from noisereg.gradcheck import check_gradients, numerical_gradient
from noisereg.nn import Dense, Mode, Network, ReLU, build_shallow_convnet
from noisereg.regularizers import (ConfigError, RegularizerConfig, Scheme, SpectralError, apply_dropout_mask,
                                   composite_loss, darc1_penalty, jacobian_penalty, l2_penalty, lcnn_penalty,
                                   loss_terms, power_iteration, spectral_normalize_step)
from noisereg.tensor import Tensor

LOGITS = [[1.0, -2.0], [3.0, 4.0]]


# ---------------------------------------------------------------- config


def test_scheme_parse_aliases():
    assert Scheme.parse("NoReg") is Scheme.NONE
    assert Scheme.parse("SpectralNorm") is Scheme.SPECTRAL
    assert Scheme.parse("weight_decay") is Scheme.L2
    with pytest.raises(ConfigError):
        Scheme.parse("bogus")


def test_config_validation():
    with pytest.raises(ConfigError):
        RegularizerConfig("l2", -1.0)
    with pytest.raises(ConfigError):
        RegularizerConfig("dropout", dropout_rate=1.0)
    with pytest.raises(ConfigError):
        RegularizerConfig("dropout")
    cfg = RegularizerConfig("darc1", 0.1)
    assert RegularizerConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- L2


def test_l2_zero_weights():
    assert l2_penalty(linear_net(np.zeros((2, 3)))).item() == 0.0


def test_l2_single_layer():
    assert l2_penalty(linear_net([[3.0, 4.0]])).item() == 25.0


def test_l2_homogeneity(rng):
    net = small_mlp(4, [5], 3)
    before = l2_penalty(net).item()
    for _, layer in net.weight_layers():
        layer.weight.data *= 3.0
    assert l2_penalty(net).item() == pytest.approx(9 * before, rel=1e-14)


def test_l2_excludes_biases_and_batchnorm():
    net = build_shallow_convnet(10, 2)
    for name, p in net.parameters():
        if not name.endswith("weight"):
            p.data += 5.0
    expected = sum(np.sum(m.data ** 2) for _, m in net.parameter_matrices())
    assert l2_penalty(net).item() == pytest.approx(expected)


# ---------------------------------------------------------------- DARC1 / LCNN


def test_darc1_examples():
    assert darc1_penalty(Tensor(np.zeros((3, 2))), 1.0).item() == 0.0
    assert darc1_penalty(Tensor(LOGITS), 1.0).item() == 3.0
    assert darc1_penalty(Tensor(LOGITS), 0.5).item() == 1.5
    assert darc1_penalty(-Tensor(LOGITS), 1.0).item() == 3.0


def test_darc1_tie_subgradient_goes_to_first_class():
    z = Tensor([[1.0, 1.0]], requires_grad=True)
    darc1_penalty(z, 1.0).backward()
    np.testing.assert_array_equal(z.grad, [[1.0, 0.0]])


def test_lcnn_examples():
    assert lcnn_penalty(Tensor(np.zeros((3, 2))), 1.0).item() == 0.0
    assert lcnn_penalty(Tensor(LOGITS), 1.0).item() == 15.0
    assert lcnn_penalty(Tensor(LOGITS) * Tensor([[1, -1], [-1, 1]]), 1.0).item() == 15.0
    # per-class sums are 10 and 20, so the max-class variant is 20 / 2
    assert lcnn_penalty(Tensor(LOGITS), 1.0, "max").item() == 10.0


def test_lcnn_bounds_darc1_on_provable_instances(rng):
    # nonnegative logits of magnitude at least 1: |z| <= z^2 entrywise
    for _ in range(20):
        z = Tensor(rng.uniform(1, 5, size=(6, 3)))
        assert darc1_penalty(z, 1.0).item() <= lcnn_penalty(z, 1.0, "max").item()


# ---------------------------------------------------------------- Jacobian


def test_jacobian_penalty_linear_net_is_lambda_frobenius(rng):
    W = rng.normal(size=(3, 6))
    net = linear_net(W, rng.normal(size=3))
    for m in (1, 4, 9):
        val = jacobian_penalty(net, rng.normal(size=(m, 6)), 0.3).item()
        assert abs(val - 0.3 * np.sum(W ** 2)) <= 1e-9 * max(1.0, val)


def test_jacobian_penalty_dead_relus_is_zero(rng):
    first = Dense(4, 5, rng=rng)
    first.bias.data[:] = -1e3
    net = Network([first, ReLU(), Dense(5, 2, rng=rng)], 2, 4)
    assert jacobian_penalty(net, rng.normal(size=(3, 4)), 1.0).item() == 0.0


def test_jacobian_penalty_matches_finite_differences(rng):
    net = small_mlp(4, [6], 3, seed=9)
    for _, layer in net.weight_layers():
        layer.bias.data = rng.normal(size=layer.bias.shape)
    X = rng.normal(size=(3, 4))
    total = 0.0
    for i in range(3):
        x = Tensor(X[i:i + 1].copy())
        for k in range(3):
            total += np.sum(numerical_gradient(lambda: net.forward(x).logits[:, k].sum(), x) ** 2)
    assert jacobian_penalty(net, X, 1.0).item() == pytest.approx(total / 3, rel=1e-3)


def test_jacobian_penalty_weight_gradient(rng):
    net = small_mlp(3, [4], 2, seed=1)
    for _, layer in net.weight_layers():
        layer.bias.data = rng.normal(size=layer.bias.shape)
    X = rng.normal(size=(2, 3))
    params = [p for _, p in net.parameters()]
    ok, err = check_gradients(lambda: jacobian_penalty(net, X, 0.7), params)
    assert ok, err


# ---------------------------------------------------------------- spectral


def test_power_iteration_identity():
    sigma, u, v = power_iteration(np.eye(3), np.array([0.6, 0.8, 0.0]), iters=1)
    assert sigma == pytest.approx(1.0, abs=1e-15)


def test_power_iteration_diag():
    sigma, u, v = power_iteration(np.diag([3.0, 1.0]), iters=50, rng=np.random.default_rng(0))
    assert sigma == pytest.approx(3.0, rel=1e-6)
    assert np.linalg.norm(u) == pytest.approx(1, abs=1e-9) and np.linalg.norm(v) == pytest.approx(1, abs=1e-9)


def test_power_iteration_zero_matrix():
    with pytest.raises(SpectralError):
        power_iteration(np.zeros((2, 2)))


def test_power_iteration_well_separated_matches_svd(rng):
    for seed in range(30):
        r = np.random.default_rng(seed)
        shape = tuple(r.integers(2, 40, size=2))
        U, _ = np.linalg.qr(r.normal(size=(shape[0], shape[0])))
        V, _ = np.linalg.qr(r.normal(size=(shape[1], shape[1])))
        s = np.sort(r.uniform(0.1, 1.0, size=min(shape)))[::-1]
        s[0] = 2.0  # gap of at least 2x
        W = U[:, :len(s)] @ np.diag(s) @ V[:, :len(s)].T
        sigma = power_iteration(W, iters=100, rng=r)[0]
        assert abs(sigma - np.linalg.svd(W, compute_uv=False)[0]) / 2.0 < 1e-6


def test_spectral_normalize_step_converges(rng):
    layer = Dense(8, 5, rng=rng)
    layer.enable_spectral(rng)
    for _ in range(200):
        spectral_normalize_step(layer)
    w_eff = layer.matrix(layer.effective_weight()).data
    assert np.linalg.svd(w_eff, compute_uv=False)[0] == pytest.approx(1.0, abs=1e-6)
    before = w_eff.copy()
    spectral_normalize_step(layer)
    after = layer.matrix(layer.effective_weight()).data
    assert np.max(np.abs(after - before)) / np.max(np.abs(before)) < 1e-6


def test_spectral_gradient_flows_through_sigma(rng):
    net = small_mlp(3, [4], 2, seed=3)
    for _, layer in net.weight_layers():
        layer.enable_spectral(rng)
    X, Y = rng.normal(size=(5, 3)), rng.integers(0, 2, 5)
    cfg = RegularizerConfig("spectral")
    params = [p for _, p in net.parameters()]
    ok, err = check_gradients(lambda: composite_loss(net, X, Y, cfg, None, Mode.EVAL), params)
    assert ok, err


# ---------------------------------------------------------------- dropout


def test_dropout_eval_is_identity(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    assert apply_dropout_mask(x, 0.5, Mode.EVAL, None) is x


def test_dropout_mask_matches_seeded_bernoulli():
    x = Tensor(np.ones((4, 6)))
    out = apply_dropout_mask(x, 0.1, Mode.TRAIN, np.random.default_rng(7)).data
    keep = np.random.default_rng(7).random((4, 6)) >= 0.1
    np.testing.assert_array_equal(out, keep / 0.9)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_dropout_rate_validated(p):
    with pytest.raises(ConfigError):
        apply_dropout_mask(Tensor([1.0]), p, Mode.TRAIN, np.random.default_rng(0))


@pytest.mark.parametrize("p", [0.2, 0.5, 0.8])
def test_dropout_expectation(p):
    out = apply_dropout_mask(Tensor(np.ones(100_000)), p, Mode.TRAIN, np.random.default_rng(0))
    assert abs(out.data.mean() - 1) < 0.02


# ---------------------------------------------------------------- composite loss


@pytest.mark.parametrize("scheme", ["none", "spectral", "dropout"])
def test_structural_schemes_add_no_penalty(rng, scheme):
    net = small_mlp(3, [4], 2)
    cfg = RegularizerConfig(scheme, dropout_rate=0.5 if scheme == "dropout" else None)
    _, ce, pen, _ = loss_terms(net, rng.normal(size=(4, 3)), [0, 1, 0, 1], cfg, rng, Mode.EVAL)
    assert pen.item() == 0.0


def test_composite_is_ce_plus_penalty(rng):
    net = small_mlp(3, [4], 2)
    X, Y = rng.normal(size=(4, 3)), np.array([0, 1, 1, 0])
    total, ce, pen, logits = loss_terms(net, X, Y, RegularizerConfig("lcnn", 0.2), None, Mode.EVAL)
    assert total.item() == pytest.approx(ce.item() + 0.2 * np.sum(logits.data ** 2) / 4)


@pytest.mark.parametrize("scheme,lam", [("l2", 0.1), ("darc1", 0.5), ("lcnn", 0.3), ("jacobian", 0.2)])
def test_penalty_weight_gradients(rng, scheme, lam):
    net = small_mlp(3, [5], 3, seed=4)
    for _, layer in net.weight_layers():
        layer.bias.data = rng.normal(size=layer.bias.shape)
    X, Y = rng.normal(size=(4, 3)), rng.integers(0, 3, 4)
    cfg = RegularizerConfig(scheme, lam)
    params = [p for _, p in net.parameters()]
    ok, err = check_gradients(lambda: composite_loss(net, X, Y, cfg, None, Mode.EVAL), params)
    assert ok, err
