"""Gradient and closed-form Hessian of the class margin, plus finite-difference oracles.

The Hessian of ``z_y - z_t`` is assembled as

    sum_I  B_I^T diag(f_I * s''(z_I)) B_I

where ``B_I`` is the Jacobian of the layer-I pre-activation w.r.t. the input
and ``f_I`` is the (y - t) row of the Jacobian of the logits w.r.t. the
layer-I post-activation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .activation import act_eval
from .network import ForwardTrace, Mlp, _check_pair, forward, margin


@dataclass(frozen=True)
class JacobianStack:
    """``B[I-1]`` is B^(I) (N_I x D); ``F[I-1]`` is F^(L,I) (N_L x N_I), I = 1..L-1."""

    B: list
    F: list


def jacobian_stack(net: Mlp, trace: ForwardTrace) -> JacobianStack:
    L = net.depth
    W = net.weights
    dact = [act_eval(net.activation, z, 1) for z in trace.z[:-1]]

    B = [W[0].copy()]
    for I in range(2, L):
        B.append(W[I - 1] @ (dact[I - 2][:, None] * B[-1]))

    # F^(L,I) for the sub-network made of layers I+1..k, grown one layer at a time
    F = []
    for I in range(1, L):
        Fk = W[I].copy()  # F^(I+1, I)
        for k in range(I + 2, L + 1):
            Fk = W[k - 1] @ (dact[k - 2][:, None] * Fk)
        F.append(Fk)
    return JacobianStack(B=B, F=F)


def _row_diff(net: Mlp, y: int, t: int) -> np.ndarray:
    W = net.weights[-1]
    return W[y] - W[t]


def grad_margin(net: Mlp, x, y: int, t: int, trace: ForwardTrace | None = None) -> np.ndarray:
    """Gradient of ``z_y - z_t`` at ``x`` by reverse accumulation."""
    _check_pair(net, y, t)
    if trace is None:
        trace = forward(net, x)
    delta = _row_diff(net, y, t)
    for I in range(net.depth - 1, 0, -1):
        delta = (delta * act_eval(net.activation, trace.z[I - 1], 1)) @ net.weights[I - 1]
    return delta


def value_and_grad_margin(net: Mlp, x, y: int, t: int) -> tuple[float, np.ndarray]:
    trace = forward(net, x)
    return float(trace.logits[y] - trace.logits[t]), grad_margin(net, x, y, t, trace)


def hessian_margin(net: Mlp, x, y: int, t: int) -> np.ndarray:
    _check_pair(net, y, t)
    trace = forward(net, x)
    stack = jacobian_stack(net, trace)
    D = net.input_dim
    H = np.zeros((D, D))
    for I in range(1, net.depth):
        f_row = stack.F[I - 1][y] - stack.F[I - 1][t]
        coeff = f_row * act_eval(net.activation, trace.z[I - 1], 2)
        B = stack.B[I - 1]
        H += B.T @ (coeff[:, None] * B)
    # exact symmetry; the sum is symmetric up to rounding only
    return 0.5 * (H + H.T)


def hessian_factors(net: Mlp, x, y: int, t: int) -> tuple[np.ndarray, np.ndarray]:
    """``(B, c)`` with ``hessian_margin = B^T diag(c) B``; B stacks every B^(I)."""
    _check_pair(net, y, t)
    trace = forward(net, x)
    stack = jacobian_stack(net, trace)
    coeffs = [
        (stack.F[I - 1][y] - stack.F[I - 1][t]) * act_eval(net.activation, trace.z[I - 1], 2)
        for I in range(1, net.depth)
    ]
    return np.vstack(stack.B), np.concatenate(coeffs)


def hessian_spectral_norm(net: Mlp, x, y: int, t: int) -> float:
    """Largest |eigenvalue| of the margin Hessian.

    When the stacked hidden width is below D, works on the small matrix
    ``G^1/2 diag(c) G^1/2`` with ``G = B B^T``, which has the same nonzero
    spectrum as ``B^T diag(c) B``.
    """
    B, c = hessian_factors(net, x, y, t)
    if B.shape[0] >= B.shape[1]:
        H = hessian_margin(net, x, y, t)
        return float(np.max(np.abs(np.linalg.eigvalsh(H))))
    lam, Q = np.linalg.eigh(B @ B.T)
    root = (Q * np.sqrt(np.clip(lam, 0.0, None))) @ Q.T
    S = root @ (c[:, None] * root)
    return float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (S + S.T)))))


def hessian_margin_batch(net: Mlp, X: np.ndarray, y: int, t: int) -> np.ndarray:
    """Stack of margin Hessians at the rows of ``X``, shape (n, D, D).

    Same sum as :func:`hessian_margin`, but the F rows are accumulated
    backwards from the (y - t) row so the batch stays cheap.
    """
    _check_pair(net, y, t)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    L = net.depth
    W = net.weights
    zs, a = [], X
    for I, layer in enumerate(net.layers):
        z = a @ layer.W.T + layer.b
        zs.append(z)
        if I < L - 1:
            a = act_eval(net.activation, z, 0)
    d1 = [act_eval(net.activation, z, 1) for z in zs[:-1]]
    d2 = [act_eval(net.activation, z, 2) for z in zs[:-1]]

    B = [np.broadcast_to(W[0], (X.shape[0],) + W[0].shape)]
    for I in range(2, L):
        B.append(np.einsum("ij,nj,njd->nid", W[I - 1], d1[I - 2], B[-1]))

    rows = [None] * (L - 1)
    row = np.broadcast_to(_row_diff(net, y, t), (X.shape[0], W[-1].shape[1]))
    rows[L - 2] = row
    for I in range(L - 2, 0, -1):
        row = (row * d1[I]) @ W[I]
        rows[I - 1] = row

    H = np.zeros((X.shape[0], net.input_dim, net.input_dim))
    for I in range(1, L):
        coeff = rows[I - 1] * d2[I - 1]
        H += np.einsum("nid,ni,nie->nde", B[I - 1], coeff, B[I - 1])
    return 0.5 * (H + np.swapaxes(H, 1, 2))


def fd_gradient(fun: Callable[[np.ndarray], float], x, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    e = np.zeros_like(x)
    for i in range(x.size):
        e[i] = step
        g[i] = (fun(x + e) - fun(x - e)) / (2.0 * step)
        e[i] = 0.0
    return g


def fd_hessian_fn(fun: Callable[[np.ndarray], float], x, step: float = 1e-4) -> np.ndarray:
    """Symmetric central second-difference Hessian of a scalar function."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    H = np.empty((n, n))
    f0 = fun(x)
    E = np.eye(n) * step
    for i in range(n):
        fp, fm = fun(x + E[i]), fun(x - E[i])
        H[i, i] = (fp - 2.0 * f0 + fm) / step**2
        for j in range(i + 1, n):
            fpp = fun(x + E[i] + E[j])
            fpm = fun(x + E[i] - E[j])
            fmp = fun(x - E[i] + E[j])
            fmm = fun(x - E[i] - E[j])
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * step**2)
    return H


def fd_hessian(net: Mlp, x, y: int, t: int, step: float = 1e-4) -> np.ndarray:
    return fd_hessian_fn(lambda v: margin(net, v, y, t), x, step)


def fd_grad_margin(net: Mlp, x, y: int, t: int, step: float = 1e-6) -> np.ndarray:
    return fd_gradient(lambda v: margin(net, v, y, t), x, step)
