import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import KINDS, random_net
from curvcert.activation import act_eval
from curvcert.diff import (
    fd_grad_margin,
    fd_hessian,
    fd_hessian_fn,
    grad_margin,
    hessian_factors,
    hessian_margin,
    hessian_margin_batch,
    hessian_spectral_norm,
    jacobian_stack,
    value_and_grad_margin,
)
from curvcert.network import Mlp, forward, margin


def _with_rows_equal(net, y, t):
    W = [w.copy() for w in net.weights]
    b = [c.copy() for c in net.biases]
    W[-1][t] = W[-1][y]
    b[-1][t] = b[-1][y]
    return net.replace(weights=W, biases=b)


def test_two_layer_stack_is_base_case(rng):
    net = random_net(rng, [4, 5, 3])
    st_ = jacobian_stack(net, forward(net, rng.standard_normal(4)))
    assert len(st_.B) == len(st_.F) == 1
    np.testing.assert_array_equal(st_.B[0], net.weights[0])
    np.testing.assert_array_equal(st_.F[0], net.weights[1])


def test_zero_first_layer_kills_everything(rng):
    net = random_net(rng, [4, 5, 6, 3], "tanh")
    net = net.replace(weights=[np.zeros((5, 4))] + net.weights[1:])
    x = rng.standard_normal(4)
    st_ = jacobian_stack(net, forward(net, x))
    assert all(np.all(B == 0) for B in st_.B)
    assert np.all(hessian_margin(net, x, 0, 1) == 0)


def _fd_jacobian_of_layer(net, x, layer, step=1e-5):
    def z_of(v):
        return forward(net, v).z[layer - 1]

    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((z_of(x + e) - z_of(x - e)) / (2 * step))
    return np.stack(cols, axis=1)


def test_b_recursion_matches_fd_jacobian(rng):
    for kind in KINDS:
        net = random_net(rng, [4, 6, 5, 7, 3], kind)
        x = rng.standard_normal(4)
        st_ = jacobian_stack(net, forward(net, x))
        for I in range(1, net.depth):
            np.testing.assert_allclose(st_.B[I - 1], _fd_jacobian_of_layer(net, x, I), atol=1e-5)


def test_f_recursion_matches_fd_of_logits_wrt_activation(rng):
    net = random_net(rng, [3, 4, 5, 6, 2], "softplus")
    x = rng.standard_normal(3)
    tr = forward(net, x)
    st_ = jacobian_stack(net, tr)
    # F^(L,I) is the Jacobian of the logits w.r.t. a^(I) of the tail network
    for I in range(1, net.depth):
        def tail(a):
            for J in range(I, net.depth):
                z = net.weights[J] @ a + net.biases[J]
                a = z if J == net.depth - 1 else act_eval(net.activation, z, 0)
            return a
        a0 = tr.a[I]
        cols = []
        for k in range(a0.size):
            e = np.zeros_like(a0)
            e[k] = 1e-6
            cols.append((tail(a0 + e) - tail(a0 - e)) / 2e-6)
        np.testing.assert_allclose(st_.F[I - 1], np.stack(cols, axis=1), atol=1e-6)


def test_gradient_examples(rng):
    net = random_net(rng, [4, 5, 3], "sigmoid")
    x = rng.standard_normal(4)
    assert np.all(grad_margin(_with_rows_equal(net, 0, 2), x, 0, 2) == 0)
    W1, W2 = net.weights
    z1 = W1 @ x + net.biases[0]
    hand = W1.T @ (act_eval("sigmoid", z1, 1) * (W2[0] - W2[2]))
    np.testing.assert_allclose(grad_margin(net, x, 0, 2), hand, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(hand, fd_grad_margin(net, x, 0, 2), rtol=1e-6, atol=1e-9)


def test_gradient_matches_fd_on_50_nets():
    r = np.random.default_rng(7)
    for k in range(50):
        depth = 2 + k % 3
        widths = [5] + [int(r.integers(2, 9)) for _ in range(depth - 1)] + [4]
        net = random_net(r, widths, KINDS[k % 3], scale=1.5)
        x = r.standard_normal(5)
        g = grad_margin(net, x, 1, 3)
        fd = fd_grad_margin(net, x, 1, 3)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-3)


def test_value_and_grad(rng):
    net = random_net(rng, [4, 5, 6, 3], "tanh")
    x = rng.standard_normal(4)
    f, g = value_and_grad_margin(net, x, 2, 0)
    assert f == margin(net, x, 2, 0)
    np.testing.assert_array_equal(g, grad_margin(net, x, 2, 0))


def test_hessian_examples(rng):
    net = random_net(rng, [4, 5, 3])
    x = rng.standard_normal(4)
    assert np.all(hessian_margin(_with_rows_equal(net, 1, 2), x, 1, 2) == 0)


@pytest.mark.parametrize("depth", [2, 3, 4])
@pytest.mark.parametrize("kind", KINDS)
def test_hessian_matches_fd(depth, kind):
    r = np.random.default_rng(depth * 10 + KINDS.index(kind))
    widths = [6] + [8] * (depth - 1) + [3]
    net = random_net(r, widths, kind, scale=1.5)
    x = r.standard_normal(6)
    H = hessian_margin(net, x, 0, 2)
    assert np.max(np.abs(H - fd_hessian(net, x, 0, 2))) < 1e-4


def test_two_layer_hessian_closed_form(rng):
    for kind in KINDS:
        net = random_net(rng, [5, 7, 4], kind)
        x = rng.standard_normal(5)
        W1, W2 = net.weights
        z1 = W1 @ x + net.biases[0]
        ref = W1.T @ np.diag((W2[1] - W2[3]) * act_eval(kind, z1, 2)) @ W1
        np.testing.assert_allclose(hessian_margin(net, x, 1, 3), ref, atol=1e-12, rtol=0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), depth=st.integers(2, 4))
def test_hessian_symmetric_and_antisymmetric_in_pair(seed, depth):
    r = np.random.default_rng(seed)
    net = random_net(r, [5] + [6] * (depth - 1) + [3], KINDS[seed % 3], scale=2.0)
    x = r.standard_normal(5) * 2
    H = hessian_margin(net, x, 0, 1)
    assert np.max(np.abs(H - H.T)) <= 1e-12
    np.testing.assert_array_equal(H, -hessian_margin(net, x, 1, 0))


def test_batch_hessian_matches_single(rng):
    net = random_net(rng, [4, 5, 6, 3], "softplus")
    X = rng.standard_normal((5, 4))
    Hb = hessian_margin_batch(net, X, 0, 2)
    for i in range(5):
        np.testing.assert_allclose(Hb[i], hessian_margin(net, X[i], 0, 2), atol=1e-12)


def test_factors_and_spectral_norm(rng):
    for depth in (2, 3):
        net = random_net(rng, [20] + [4] * (depth - 1) + [3], "tanh")
        x = rng.standard_normal(20)
        B, c = hessian_factors(net, x, 0, 1)
        np.testing.assert_allclose(B.T @ (c[:, None] * B), hessian_margin(net, x, 0, 1), atol=1e-12)
        dense = np.max(np.abs(np.linalg.eigvalsh(hessian_margin(net, x, 0, 1))))
        assert hessian_spectral_norm(net, x, 0, 1) == pytest.approx(dense, rel=1e-9, abs=1e-12)


def test_fd_oracle_exact_on_quadratic(rng):
    A = rng.standard_normal((4, 4))
    A = A + A.T

    def q(v):
        return 0.5 * v @ A @ v + v.sum()

    H = fd_hessian_fn(q, rng.standard_normal(4), step=1e-3)
    np.testing.assert_allclose(H, A, atol=1e-6)
    with pytest.raises(ValueError):
        fd_hessian_fn(q, np.zeros(4), step=0.0)


def test_fd_step_halving_converges_quadratically():
    # only the cubic part contributes truncation error, so halving the step
    # should cut the error by about 4
    def f(v):
        return np.sin(v[0]) * np.exp(v[1]) + v[0] ** 4

    x = np.array([0.3, -0.2])
    exact = np.array([
        [-np.sin(0.3) * np.exp(-0.2) + 12 * 0.3**2, np.cos(0.3) * np.exp(-0.2)],
        [np.cos(0.3) * np.exp(-0.2), np.sin(0.3) * np.exp(-0.2)],
    ])
    e1 = np.max(np.abs(fd_hessian_fn(f, x, 2e-2) - exact))
    e2 = np.max(np.abs(fd_hessian_fn(f, x, 1e-2) - exact))
    assert 3.0 < e1 / e2 < 5.0


def test_fd_hessian_on_net_converges(rng):
    net = random_net(rng, [3, 5, 3], "sigmoid", scale=3.0)
    x = rng.standard_normal(3)
    H = hessian_margin(net, x, 0, 1)
    e1 = np.max(np.abs(fd_hessian(net, x, 0, 1, step=4e-2) - H))
    e2 = np.max(np.abs(fd_hessian(net, x, 0, 1, step=2e-2) - H))
    assert 3.0 < e1 / e2 < 5.0


def test_degenerate_pair_rejected(rng):
    net = random_net(rng, [3, 4, 2])
    with pytest.raises(ValueError):
        hessian_margin(net, np.zeros(3), 1, 1)
    assert isinstance(net, Mlp)
