import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saliency_tal import numerics as nx
from saliency_tal.numerics import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


# ---------------------------------------------------------------- forward values


def test_matmul_identity_and_arithmetic(f64):
    X = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(nx.matmul(Tensor(np.eye(2)), Tensor(X)).data, X)
    assert nx.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes(f64):
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples(f64):
    np.testing.assert_allclose(nx.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    big = nx.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big))
    assert big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0, abs=1e-300)


def test_masked_softmax_scatters_two_element_softmax(f64, rng):
    for _ in range(20):
        a, junk, b = rng.normal(size=3) * 5
        out = nx.softmax(Tensor([a, junk, b]), np.array([True, False, True])).data
        ea, eb = math.exp(a), math.exp(b)
        np.testing.assert_allclose(out, [ea / (ea + eb), 0.0, eb / (ea + eb)], rtol=1e-13)
        assert out[1] == 0.0


def test_fully_masked_softmax_row_raises(f64):
    with pytest.raises(ValueError):
        nx.softmax(Tensor(np.zeros((2, 3))), np.array([[True, False, False], [False, False, False]]))


@pytest.mark.parametrize("bits,tol", [(64, 1e-9), (32, 1e-5)])
def test_softmax_rows_sum_to_one(bits, tol, rng):
    with nx.precision(bits):
        x = Tensor(rng.normal(size=(50, 9)) * 4)
        mask = rng.random((50, 9)) < 0.6
        mask[:, 4] = True
        s = nx.softmax(x, mask).data
        np.testing.assert_allclose(s.sum(-1), 1.0, atol=tol)
        assert np.all(s[~mask] == 0)


def test_layer_norm_statistics(f64, rng):
    x = Tensor(rng.normal(3.0, 7.0, size=(40, 16)))
    y = nx.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.abs(y.mean(-1)).max() < 1e-7
    assert np.abs(y.var(-1) - 1).max() < 1e-5
    const = nx.layer_norm(Tensor(np.full((1, 8), 2.5)), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.array_equal(const, np.zeros((1, 8)))


def test_conv1d_examples(f64, rng):
    x = Tensor(np.array([1.0, 2, 3, 4])[:, None])
    y = nx.conv1d(x, Tensor(np.ones((3, 1, 1))))
    assert y.data[:, 0].tolist() == [3.0, 6.0, 9.0, 7.0]

    # width 1 is a per-timestep linear map
    X = rng.normal(size=(10, 4))
    W = rng.normal(size=(4, 5))
    np.testing.assert_allclose(nx.conv1d(Tensor(X), Tensor(W[None])).data, X @ W, rtol=1e-13)

    assert nx.conv1d(Tensor(np.ones((96, 2))), Tensor(np.ones((1, 2, 2))), stride=2).shape == (48, 2)


def test_conv1d_depthwise_is_per_channel(f64, rng):
    X = rng.normal(size=(12, 3))
    K = rng.normal(size=(3, 3))
    y = nx.conv1d(Tensor(X), Tensor(K), depthwise=True).data
    for c in range(3):
        ref = np.convolve(np.pad(X[:, c], 1), K[::-1, c], mode="valid")
        np.testing.assert_allclose(y[:, c], ref, rtol=1e-12)


def test_conv1d_rejects_empty_output(f64):
    with pytest.raises(ValueError):
        nx.conv1d(Tensor(np.ones((2, 1))), Tensor(np.ones((5, 1, 1))), padding=0)


def test_max_pool2_masked(f64):
    y, m = nx.max_pool2(Tensor(np.array([1.0, 5, 2, 2])[:, None]), np.ones(4, bool))
    assert y.data[:, 0].tolist() == [5.0, 2.0] and m.tolist() == [True, True]
    y, m = nx.max_pool2(Tensor(np.array([1.0, 5, 2, 9])[:, None]), np.array([True, True, True, False]))
    assert y.data[:, 0].tolist() == [5.0, 2.0] and m.tolist() == [True, True]


def test_broadcasting_is_strict(f64):
    nx.add(Tensor(np.ones((3, 4))), Tensor(np.ones(4)))
    with pytest.raises(ValueError):
        nx.add(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 1))))


def test_precision_modes():
    with nx.precision(32):
        assert Tensor([1.0]).data.dtype == np.float32
    with nx.precision(64):
        assert Tensor([1.0]).data.dtype == np.float64


def test_backward_accumulates_over_shared_nodes(f64):
    a = leaf([2.0])
    b = a * a + a  # d/da = 2a + 1
    nx.sum(b * 3.0).backward()
    assert a.grad.tolist() == [15.0]


# ---------------------------------------------------------------- gradients


def test_grad_check_sum_of_squares(f64, rng):
    p = leaf(rng.normal(size=(4, 3)))
    assert nx.grad_check(lambda: nx.sum(p * p), [p]) < 1e-8


def test_grad_check_argument_guards(f64):
    p = leaf([1.0])
    with pytest.raises(ValueError):
        nx.grad_check(lambda: nx.sum(p), [p], h=1e-3)
    with nx.precision(32):
        q = leaf([1.0])
    with pytest.raises(ValueError):
        nx.grad_check(lambda: nx.sum(q), [q])
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        nx.grad_check(lambda: nx.sum(nx.log(p - 2.0)), [p])


def test_matmul_gradient_3x3(f64, rng):
    a, b = leaf(rng.normal(size=(3, 3))), leaf(rng.normal(size=(3, 3)))
    assert nx.grad_check(lambda: nx.sum(nx.matmul(a, b)), [a]) < 1e-6


def _primitive_cases(rng):
    """(name, scalar function, params) for every differentiable primitive."""
    x = leaf(rng.normal(size=(5, 6)))
    y = leaf(rng.normal(size=(5, 6)))
    pos = leaf(rng.uniform(0.5, 2.0, size=(5, 6)))
    w = rng.normal(size=(5, 6))
    g, b = leaf(rng.normal(size=6)), leaf(rng.normal(size=6))
    mask = rng.random((5, 6)) < 0.7
    mask[:, 0] = True
    rowmask = np.array([True, False, True, True, False])
    cw = leaf(rng.normal(size=(3, 6, 4)))
    dw = leaf(rng.normal(size=(3, 6)))
    cb = leaf(rng.normal(size=4))
    q = leaf(rng.normal(size=(2, 7, 3)))
    k = leaf(rng.normal(size=(2, 7, 3)))
    p5 = leaf(rng.normal(size=(2, 7, 5)))
    pool_in = leaf(rng.normal(size=(8, 3)))
    pool_mask = np.array([1, 1, 1, 0, 0, 0, 1, 0], bool)
    lin_w = leaf(rng.normal(size=(6, 2)))
    readout = {}

    def wsum(t, key):
        # random readout weights drawn once, so the function stays fixed across probes
        if key not in readout:
            readout[key] = rng.normal(size=t.shape)
        return nx.sum(t * readout[key])

    return [
        ("add", lambda: nx.sum((x + y) * w), [x, y]),
        ("sub", lambda: nx.sum((x - y) * w), [x, y]),
        ("mul", lambda: nx.sum(x * y * w), [x, y]),
        ("div", lambda: nx.sum(x / pos * w), [x, pos]),
        ("power", lambda: nx.sum(nx.power(pos, 2.5) * w), [pos]),
        ("exp", lambda: nx.sum(nx.exp(x) * w), [x]),
        ("log", lambda: nx.sum(nx.log(pos) * w), [pos]),
        ("sigmoid", lambda: nx.sum(nx.sigmoid(x) * w), [x]),
        ("softplus", lambda: nx.sum(nx.softplus(x) * w), [x]),
        ("gelu", lambda: nx.sum(nx.gelu(x) * w), [x]),
        ("minimum", lambda: nx.sum(nx.minimum(x, y + 0.01) * w), [x, y]),
        ("mask_rows", lambda: nx.sum(nx.mask_rows(x, rowmask) * w), [x]),
        ("mean", lambda: nx.sum(nx.mean(x * w, axis=0) * nx.mean(y, axis=0)), [x, y]),
        ("reshape", lambda: nx.sum(nx.reshape(x, (3, 10)) * w.reshape(3, 10)), [x]),
        ("swapaxes", lambda: nx.sum(nx.swapaxes(x, 0, 1) * w.T), [x]),
        ("concat", lambda: nx.sum(nx.concat([x, y], axis=0) * np.concatenate([w, -w])), [x, y]),
        ("linear", lambda: nx.sum(nx.linear(x, lin_w, None) * w[:, :2]), [x, lin_w]),
        ("softmax", lambda: nx.sum(nx.softmax(x, mask) * w), [x]),
        ("layer_norm", lambda: nx.sum(nx.layer_norm(x, g, b) * w), [x, g, b]),
        ("conv1d", lambda: wsum(nx.conv1d(x, cw, cb), "conv1d"), [x, cw, cb]),
        ("conv1d_stride2", lambda: wsum(nx.conv1d(x, cw, cb, stride=2), "conv1d_stride2"), [x, cw, cb]),
        ("conv1d_depthwise", lambda: wsum(nx.conv1d(x, dw, b, depthwise=True), "conv1d_depthwise"), [x, dw, b]),
        ("max_pool2", lambda: wsum(nx.max_pool2(pool_in, pool_mask)[0], "max_pool2"), [pool_in]),
        ("local_scores", lambda: wsum(nx.local_scores(q, k, 5), "local_scores"), [q, k]),
        ("local_aggregate", lambda: wsum(nx.local_aggregate(p5, k, 5), "local_aggregate"), [p5, k]),
    ]


NAMES = [c[0] for c in _primitive_cases(np.random.default_rng(0))]


@pytest.mark.parametrize("name", NAMES)
def test_primitive_gradients_over_seeds(name):
    """Every primitive matches central differences at 1e-5 on 20 random draws.

    The widest allowed step keeps roundoff (about eps * |f| / h) small on near-zero entries.
    """
    worst = 0.0
    with nx.precision(64):
        for seed in range(20):
            cases = {c[0]: c for c in _primitive_cases(np.random.default_rng(seed))}
            _, f, params = cases[name]
            worst = max(worst, nx.grad_check(f, params, h=1e-4))
    assert worst < 1e-5, f"{name}: {worst:.3e}"


def test_determinism_bit_identical(f64, rng):
    x = rng.normal(size=(2, 16, 8))
    w = rng.normal(size=(3, 8, 8))
    a = nx.conv1d(Tensor(x), Tensor(w)).data
    b = nx.conv1d(Tensor(x), Tensor(w)).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_softmax_is_a_distribution(values):
    with nx.precision(64):
        s = nx.softmax(Tensor(values)).data
    assert np.all(s >= 0) and abs(s.sum() - 1) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
def test_softplus_and_sigmoid_are_finite_and_consistent(values):
    with nx.precision(64):
        x = Tensor(values)
        sp = nx.softplus(x).data
        sg = nx.sigmoid(x).data
        sp_neg = nx.softplus(Tensor(-np.asarray(values))).data
    assert np.all(np.isfinite(sp)) and np.all(sp >= 0)
    assert np.all((sg >= 0) & (sg <= 1))
    # softplus(x) - softplus(-x) = x
    np.testing.assert_allclose(sp - sp_neg, values, atol=1e-9)
