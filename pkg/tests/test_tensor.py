import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisereg import functional as F
from noisereg import tensor as T
from noisereg.functional import LabelError
from noisereg.gradcheck import check_gradients, numerical_gradient, relative_error, resolution
from noisereg.tensor import ContractError, DimensionError, NonFiniteError, Tensor, grad, no_grad


def t(x, rg=True):
    return Tensor(np.asarray(x, dtype=float), requires_grad=rg)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    out = Tensor(np.eye(2)) @ Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_projector():
    out = Tensor([[1, 0], [0, 0]]) @ Tensor([[5], [7]])
    np.testing.assert_array_equal(out.data, [[5], [0]])


def test_matmul_grad_is_ones_times_b_transpose(rng):
    a, b = t(rng.normal(size=(3, 4))), t(rng.normal(size=(4, 2)))
    (a @ b).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-12)
    num = numerical_gradient(lambda: (a @ b).sum(), a)
    np.testing.assert_allclose(a.grad, num, rtol=1e-7)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


# ---------------------------------------------------------------- conv1d


def naive_conv1d(x, w, stride):
    B, C, L = x.shape
    O, _, k = w.shape
    lout = (L - k) // stride + 1
    out = np.zeros((B, O, lout))
    for b in range(B):
        for o in range(O):
            for i in range(lout):
                out[b, o, i] = np.sum(x[b, :, i * stride:i * stride + k] * w[o])
    return out


def test_conv1d_identity_kernel():
    out = F.conv1d(Tensor([[[1, 2, 3]]]), Tensor([[[1]]]))
    np.testing.assert_array_equal(out.data, [[[1, 2, 3]]])


def test_conv1d_box_filter():
    out = F.conv1d(Tensor([[[1, 1, 1, 1]]]), Tensor([[[1, 1]]]))
    np.testing.assert_array_equal(out.data, [[[2, 2, 2]]])


def test_conv1d_output_shape(rng):
    out = F.conv1d(Tensor(rng.normal(size=(2, 3, 10))), Tensor(rng.normal(size=(5, 3, 3))))
    assert out.shape == (2, 5, 8)


def test_conv1d_kernel_longer_than_input():
    with pytest.raises(DimensionError):
        F.conv1d(Tensor(np.ones((1, 1, 2))), Tensor(np.ones((1, 1, 3))))


def test_conv1d_channel_mismatch():
    with pytest.raises(DimensionError):
        F.conv1d(Tensor(np.ones((1, 2, 5))), Tensor(np.ones((1, 3, 2))))


@pytest.mark.parametrize("stride", [1, 2, 3])
@pytest.mark.parametrize("shape", [(1, 1, 7), (2, 3, 11), (3, 1, 9), (1, 4, 5)])
def test_conv1d_matches_naive_and_adjoints(rng, stride, shape):
    B, C, L = shape
    x = rng.normal(size=shape)
    w = rng.normal(size=(4, C, 3))
    out = F.conv1d(Tensor(x), Tensor(w), stride)
    ref = naive_conv1d(x, w, stride)
    np.testing.assert_allclose(out.data, ref, rtol=1e-12, atol=1e-12)
    # <conv(x), g> = <x, conv^T g> for the input grad, same for the weight grad
    g = rng.normal(size=ref.shape)
    xt, wt = t(x), t(w)
    F.conv1d(xt, wt, stride).backward(g)
    np.testing.assert_allclose(np.sum(ref * g), np.sum(x * xt.grad), rtol=1e-10)
    np.testing.assert_allclose(np.sum(ref * g), np.sum(w * wt.grad), rtol=1e-10)


def test_conv1d_gradcheck_with_bias(rng):
    x, w, b = t(rng.normal(size=(2, 2, 8))), t(rng.normal(size=(3, 2, 3))), t(rng.normal(size=3))
    ok, err = check_gradients(lambda: (F.conv1d(x, w, 2, b) ** 2).sum(), [x, w, b])
    assert ok, err


def test_conv1d_double_backward(rng):
    x, w = t(rng.normal(size=(2, 2, 7))), t(rng.normal(size=(3, 2, 3)))

    def f():
        out = F.conv1d(x, w, 1)
        (gx,) = grad((out * out).sum(), [x], create_graph=True)
        return (gx * gx).sum()

    ok, err = check_gradients(f, [w])
    assert ok, err


# ---------------------------------------------------------------- relu


def test_relu_values():
    np.testing.assert_array_equal(F.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    np.testing.assert_array_equal(F.relu(Tensor([-3.0, -1e-9])).data, [0, 0])


def test_relu_grad_gate():
    x = t([-1.0, 3.0])
    F.relu(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [0, 1])


def test_relu_subgradient_at_zero_is_zero():
    x = t([0.0])
    F.relu(x).sum().backward()
    assert x.grad[0] == 0.0


# ---------------------------------------------------------------- cross-entropy


def test_ce_uniform_is_log_k():
    loss = F.softmax_cross_entropy(Tensor(np.zeros((4, 10))), [0, 3, 9, 2])
    assert loss.item() == pytest.approx(math.log(10), abs=1e-15)


def test_ce_confident_is_zero():
    logits = np.zeros((1, 5))
    logits[0, 2] = 100.0
    assert F.softmax_cross_entropy(Tensor(logits), [2]).item() == pytest.approx(0.0, abs=1e-40)


def test_ce_two_class_formula():
    # -log softmax: label 0 gives ln(e + e^2) - 1, label 1 gives ln(e + e^2) - 2
    z = Tensor([[1.0, 2.0]])
    assert F.softmax_cross_entropy(z, [0]).item() == pytest.approx(math.log(1 + math.e), abs=1e-12)
    loss = F.softmax_cross_entropy(z, [1]).item()
    assert loss == pytest.approx(math.log(1 + math.e) - 1, abs=1e-12)
    assert loss == pytest.approx(0.313262, abs=1e-6)


def test_ce_grad_is_softmax_minus_onehot(rng):
    z = t(rng.normal(size=(3, 4)))
    y = np.array([0, 3, 1])
    F.softmax_cross_entropy(z, y).backward()
    p = np.exp(z.data - z.data.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    p[np.arange(3), y] -= 1
    np.testing.assert_allclose(z.grad, p / 3, rtol=1e-12)


def test_ce_label_out_of_range_names_index():
    with pytest.raises(LabelError, match="1"):
        F.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 5])


def test_ce_stable_for_huge_logits():
    loss = F.softmax_cross_entropy(Tensor([[1000.0, -1000.0]]), [1]).item()
    assert loss == pytest.approx(2000.0)


@given(st.integers(1, 6), st.integers(2, 6), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_ce_nonnegative(m, k, seed):
    r = np.random.default_rng(seed)
    loss = F.softmax_cross_entropy(Tensor(r.normal(size=(m, k)) * 5), r.integers(0, k, m)).item()
    assert loss >= 0


# ---------------------------------------------------------------- backward / tape


def test_backward_non_scalar_is_contract_error():
    with pytest.raises(ContractError):
        (t([1.0, 2.0]) * 2).backward()


def test_gradient_accumulates_over_shared_uses(rng):
    a = t(rng.normal(size=3))
    (a * a + a).sum().backward()
    # the same function written with independent copies
    b1, b2, b3 = (t(a.data.copy()) for _ in range(3))
    (b1 * b2 + b3).sum().backward()
    np.testing.assert_allclose(a.grad, b1.grad + b2.grad + b3.grad, rtol=1e-15)


def test_backward_accumulates_across_calls():
    a = t([2.0])
    (a * 3).sum().backward()
    (a * 3).sum().backward()
    assert a.grad[0] == 6.0


def test_diamond_graph_visits_once():
    a = t([1.5])
    b = a * 2
    c = b + b * b
    c.sum().backward()
    assert a.grad[0] == pytest.approx(2 + 8 * 1.5)


def test_grad_does_not_touch_leaf_grad():
    a = t([1.0, 2.0])
    (g,) = grad((a * a).sum(), [a])
    np.testing.assert_array_equal(g.data, [2, 4])
    assert a.grad is None


def test_grad_unreachable_input_gets_zero():
    a, b = t([1.0]), t([2.0])
    ga, gb = grad((a * 3).sum(), [a, b])
    assert gb.data[0] == 0.0 and ga.data[0] == 3.0


def test_no_grad_records_nothing():
    a = t([1.0])
    with no_grad():
        b = a * 2
    assert not b.requires_grad and b.is_leaf


def test_zero_extent_shape_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))


@pytest.mark.filterwarnings("ignore:divide by zero")
def test_non_finite_result_raises():
    with pytest.raises(NonFiniteError):
        Tensor([0.0]).log()


def test_broadcast_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_second_derivative_of_cube():
    x = t([1.5])
    (g,) = grad((x ** 3).sum(), [x], create_graph=True)
    (h,) = grad(g.sum(), [x])
    assert h.data[0] == pytest.approx(6 * 1.5)


# ---------------------------------------------------------------- primitive sweep

UNARY = {
    "exp": lambda a: a.exp(),
    "log": lambda a: (a * a + 1.0).log(),
    "sqrt": lambda a: (a * a + 0.5).sqrt(),
    "abs": lambda a: a.abs(),
    "neg": lambda a: -a,
    "pow": lambda a: a ** 3,
    "relu": F.relu,
    "sum_axis": lambda a: a.sum(axis=-1),
    "mean": lambda a: a.mean(axis=0, keepdims=True),
    "max": lambda a: a.max(axis=-1),
    "transpose": lambda a: a.T,
    "reshape": lambda a: a.reshape(-1),
    "getitem": lambda a: a[..., :1],
    "softmax": lambda a: F.softmax(a.reshape(1, -1)),
    "log_softmax": lambda a: F.log_softmax(a.reshape(1, -1)),
}
BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "matmul": lambda a, b: a @ b.T,
    "broadcast_add": lambda a, b: a + b.sum(axis=0, keepdims=True),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitives_gradcheck(name):
    for seed in range(8):
        r = np.random.default_rng(seed)
        shape = tuple(r.integers(1, 5, size=r.integers(1, 3)))
        x = t(r.normal(size=shape) + 0.05)  # stay off the kinks of abs/relu/max
        w = Tensor(r.normal(size=UNARY[name](Tensor(x.data)).shape))
        ok, err = check_gradients(lambda: (UNARY[name](x) * w).sum(), x)
        assert ok, (name, shape, err)


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitives_gradcheck(name):
    for seed in range(8):
        r = np.random.default_rng(100 + seed)
        shape = (int(r.integers(1, 5)), int(r.integers(1, 5)))
        a, b = t(r.normal(size=shape)), t(r.normal(size=shape))
        w = Tensor(r.normal(size=BINARY[name](Tensor(a.data), Tensor(b.data)).shape))
        ok, err = check_gradients(lambda: (BINARY[name](a, b) * w).sum(), [a, b])
        assert ok, (name, shape, err)


def test_batch_norm_gradcheck(rng):
    x = t(rng.normal(size=(6, 3)))
    g, b = t(rng.normal(size=(1, 3))), t(rng.normal(size=(1, 3)))
    w = Tensor(rng.normal(size=(6, 3)))
    ok, err = check_gradients(lambda: (F.batch_norm(x, g, b, (0,), 1e-5)[0] * w).sum(), [x, g, b])
    assert ok, err


def test_batch_norm_3d_gradcheck(rng):
    x = t(rng.normal(size=(3, 2, 5)))
    g, b = t(rng.normal(size=(1, 2, 1))), t(rng.normal(size=(1, 2, 1)))
    w = Tensor(rng.normal(size=(3, 2, 5)))
    ok, err = check_gradients(lambda: (F.batch_norm(x, g, b, (0, 2), 1e-5)[0] * w).sum(), [x, g, b])
    assert ok, err


def test_batch_norm_double_backward(rng):
    x = t(rng.normal(size=(5, 3)))
    g = t(rng.normal(size=(1, 3)))
    b = Tensor(np.zeros((1, 3)))

    def f():
        out = F.batch_norm(x, g, b, (0,), 1e-5)[0]
        (gx,) = grad((out ** 3).sum(), [x], create_graph=True)
        return (gx * gx).sum()

    ok, err = check_gradients(f, [g])
    assert ok, err


def test_check_gradients_detects_wrong_gradient():
    x = t([1.0, 2.0])

    def f():
        # a primitive with a deliberately wrong backward
        def backward(g, needs):
            return (g * 3.0,)

        out = T._make(x.data * 2.0, (x,), backward, "bogus")
        return out.sum()

    ok, err = check_gradients(f, x)
    assert not ok and err > 0.1


def test_relative_error_forgives_only_unresolvable_gaps():
    res = resolution(10.0, 1e-5)
    assert res == pytest.approx(16 * np.spacing(10.0) / 2e-5)
    # a two-ulp difference quotient on a zero gradient is roundoff, not error
    two_ulp = 2 * np.spacing(10.0) / 2e-5
    assert relative_error(np.zeros(3), np.full(3, two_ulp), scale=0.5) > 1e-4
    assert relative_error(np.zeros(3), np.full(3, two_ulp), scale=0.5, resolution=res) == 0.0
    # real mismatches still count
    assert relative_error(np.ones(3), np.full(3, 1.001), resolution=res) == pytest.approx(1e-3 / 1.001, rel=1e-5)

