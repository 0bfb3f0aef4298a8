import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dbilstm import core_math as cm
from dbilstm.core_math import Graph, Tensor
from dbilstm.errors import ContractError, ShapeError


def test_matmul_identity():
    out = cm.matmul(np.eye(2), np.array([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])


def test_matmul_hand_value():
    assert cm.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]


def test_matmul_mismatch():
    with pytest.raises(ShapeError):
        cm.matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_matmul_batched_matches_einsum():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 2))
    np.testing.assert_allclose(cm.matmul(a, b).data, np.einsum("ijk,kl->ijl", a, b), atol=1e-14)


def test_activations():
    assert cm.tanh(0.0).data == 0.0
    assert cm.sigmoid(0.0).data == 0.5
    big = cm.tanh(np.array([1e6, -1e6])).data
    np.testing.assert_array_equal(big, [1.0, -1.0])
    s = cm.sigmoid(np.array([1e6, -1e6])).data
    assert np.all(np.isfinite(s)) and s[0] == 1.0 and s[1] == 0.0


def test_cross_entropy_uniform_is_log_g():
    loss, probs = cm.softmax_cross_entropy(np.zeros((4, 65)), [0, 5, 17, 64])
    assert abs(float(loss.data) - math.log(65)) < 1e-12
    assert abs(math.log(65) - 4.17439) < 1e-5


def test_cross_entropy_confident():
    logits = np.zeros((1, 5))
    logits[0, 2] = 1e3
    loss, _ = cm.softmax_cross_entropy(logits, [2])
    assert float(loss.data) < 1e-12


def test_cross_entropy_label_range():
    with pytest.raises(IndexError):
        cm.softmax_cross_entropy(np.zeros((2, 3)), [0, 3])


@given(st.integers(1, 8), st.integers(2, 70), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_softmax_rows_are_simplex(b, g, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=20, size=(b, g))
    labels = rng.integers(0, g, size=b)
    loss, probs = cm.softmax_cross_entropy(logits, labels)
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert float(loss.data) >= 0


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        y = cm.tanh(x)
    with pytest.raises(ContractError):
        cm.backward(g, y)


def test_untouched_leaf_gets_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    with Graph() as g:
        y = cm.sum_(cm.mul(x, x))
    gx, gu = cm.backward(g, y, [x, unused])
    np.testing.assert_array_equal(gx, 2 * np.ones(3))
    np.testing.assert_array_equal(gu, np.zeros((2, 2)))


def test_backward_order_is_reverse_of_forward():
    x = Tensor(np.array([0.3, -0.2]), requires_grad=True)
    with Graph() as g:
        y = cm.sum_(cm.tanh(cm.mul(x, x)))
    visited = []
    for node in g.nodes:
        fn = node.backward_fn
        node.backward_fn = (lambda f, n: (lambda grad: (visited.append(n), f(grad))))(fn, node)
    cm.backward(g, y)
    assert visited == list(reversed(g.nodes))


def test_grad_check_square():
    err = cm.grad_check(lambda t: cm.sum_(cm.mul(t, t)), np.array([3.0]))
    assert err < 1e-8
    leaf = Tensor(np.array([3.0]), requires_grad=True)
    with Graph() as g:
        out = cm.sum_(cm.mul(leaf, leaf))
    (grad,) = cm.backward(g, out, [leaf])
    assert abs(grad[0] - 6.0) < 1e-12


def test_grad_check_constant():
    f = lambda t: cm.sum_(cm.mul(Tensor(np.zeros(3)), t))  # noqa: E731
    assert cm.grad_check(f, np.ones(3)) == 0.0


def _primitive_cases(rng):
    A = rng.normal(size=(3, 4))
    B = rng.normal(size=(4, 2))
    v = rng.normal(size=(4,))
    mask = (rng.random((3, 4)) > 0.3) / 0.7
    labels = np.array([0, 3, 1])
    Z = rng.normal(size=(2, 4, 3, 8))
    U = rng.normal(size=(8, 2))
    W4 = rng.normal(size=(2, 4, 3, 2))
    return {
        "lstm_scan_z": (lambda t: cm.sum_(cm.mul(cm.lstm_scan(t, U), W4)), Z.copy()),
        "lstm_scan_u": (lambda t: cm.sum_(cm.mul(cm.lstm_scan(Z, t), W4)), U.copy()),
        "matmul_left": (lambda t: cm.sum_(cm.tanh(cm.matmul(t, B))), A),
        "matmul_right": (lambda t: cm.sum_(cm.tanh(cm.matmul(A, t))), B),
        "matmul_batched": (lambda t: cm.sum_(cm.tanh(cm.matmul(t, B))), rng.normal(size=(2, 3, 4))),
        "add_broadcast": (lambda t: cm.sum_(cm.tanh(cm.add(A, t))), v),
        "mul_broadcast": (lambda t: cm.sum_(cm.tanh(cm.mul(A, t))), v),
        "tanh": (lambda t: cm.sum_(cm.mul(cm.tanh(t), A)), A.copy()),
        "sigmoid": (lambda t: cm.sum_(cm.mul(cm.sigmoid(t), A)), A.copy()),
        "transpose": (lambda t: cm.sum_(cm.tanh(cm.matmul(cm.transpose(t), A))), rng.normal(size=(3, 2))),
        "reshape": (lambda t: cm.sum_(cm.mul(cm.reshape(t, (4, 3)), A.T)), A.copy()),
        "slice": (lambda t: cm.sum_(cm.tanh(cm.slice_(t, (slice(None), slice(None, None, -2))))), A.copy()),
        "concat": (lambda t: cm.sum_(cm.tanh(cm.concat([t, A, t], axis=1))), A.copy()),
        "stack": (lambda t: cm.sum_(cm.tanh(cm.stack([t, t, A], axis=1))), A.copy()),
        "gather_rows": (lambda t: cm.sum_(cm.tanh(cm.gather_rows(t, [2, 0, 2]))), A.copy()),
        "mask": (lambda t: cm.sum_(cm.tanh(cm.apply_mask(t, mask))), A.copy()),
        "softmax_ce": (lambda t: cm.softmax_cross_entropy(t, labels)[0], A.copy()),
    }


@pytest.mark.parametrize("name", list(_primitive_cases(np.random.default_rng(0))))
def test_primitive_gradients(name):
    f, theta = _primitive_cases(np.random.default_rng(7))[name]
    assert cm.grad_check(f, theta) <= 1e-6


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_backward_linearity(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, 3))
    theta = rng.normal(size=(3, 3))

    def grad_of(build):
        leaf = Tensor(theta.copy(), requires_grad=True)
        with Graph() as g:
            out = build(leaf)
        return cm.backward(g, out, [leaf])[0]

    f = lambda t: cm.sum_(cm.tanh(cm.matmul(t, A)))  # noqa: E731
    h = lambda t: cm.sum_(cm.mul(cm.sigmoid(t), t))  # noqa: E731
    g_sum = grad_of(lambda t: cm.add(f(t), h(t)))
    np.testing.assert_allclose(g_sum, grad_of(f) + grad_of(h), rtol=0, atol=1e-12)


def test_dropout_rate_zero_is_identity():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert cm.dropout(x, 0.0, np.random.default_rng(0)) is x
    np.testing.assert_array_equal(cm.dropout(x, 0.5, None, training=False).data, x.data)


def test_inverted_dropout_is_unbiased():
    rng = np.random.default_rng(3)
    x = np.linspace(-1, 1, 12)
    draws = np.stack([cm.dropout(Tensor(x), 0.2, rng).data for _ in range(20000)])
    assert np.max(np.abs(draws.mean(axis=0) - x)) < 1e-2


def test_no_graph_means_no_recording():
    x = Tensor(np.ones(2), requires_grad=True)
    y = cm.tanh(x)
    assert not y.requires_grad and y.backward_fn is None


def test_lstm_scan_matches_composed_cell():
    rng = np.random.default_rng(3)
    B, n, d, H = 2, 5, 3, 4
    z = rng.normal(size=(B, n, d, 4 * H))
    U = rng.normal(size=(4 * H, H))
    h = np.zeros((B, d, H))
    c = np.zeros((B, d, H))
    sig = lambda x: 1 / (1 + np.exp(-x))  # noqa: E731
    expect = []
    for k in range(n):
        pre = z[:, k] + h @ U.T
        i, f, g, o = sig(pre[..., :H]), sig(pre[..., H : 2 * H]), np.tanh(pre[..., 2 * H : 3 * H]), sig(pre[..., 3 * H :])
        c = f * c + i * g
        h = o * np.tanh(c)
        expect.append(h)
    np.testing.assert_allclose(cm.lstm_scan(z, U).data, np.stack(expect, axis=1), rtol=0, atol=1e-14)
    with pytest.raises(ShapeError):
        cm.lstm_scan(z, rng.normal(size=(4 * H, H + 1)))
