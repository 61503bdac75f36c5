"""Global and local bounds on the eigenvalues of the margin Hessian.

``m I <= Hessian <= M I`` and ``||Hessian|| <= K`` hold for every input (or,
for local bounds, every input in a ball).  Two-layer nets get the tighter
(m, M) from per-neuron second-derivative bounds; every depth gets K from the
product-of-norms bound.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .activation import profile, second_deriv_range_array
from .network import Mlp, _check_pair

log = logging.getLogger(__name__)

POWER_ITERS = 25
# bounds feed certificates, so they are iterated to convergence instead of
# stopping after the fixed training-time budget
BOUND_ITERS = 20000
BOUND_TOL = 1e-13


def power_iteration(A, iters: int = POWER_ITERS, tol: Optional[float] = None, seed: int = 0):
    """Dominant-magnitude eigenpair of a symmetric matrix.

    Returns ``(|lambda|, v)``.  Starts from a fixed-seed random unit vector.
    With ``tol`` set, stops early once the Rayleigh quotient changes by less
    than ``tol`` relative.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    n = A.shape[0]
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = A @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, v
        v = w / nw
        new = abs(float(v @ (A @ v)))
        if tol is not None and abs(new - lam) <= tol * max(new, 1e-300):
            lam = new
            break
        lam = new
    return lam, v


def spectral_norm(W, iters: int = BOUND_ITERS, tol: Optional[float] = BOUND_TOL) -> float:
    """Largest singular value, as sqrt of the top eigenvalue of the Gram matrix."""
    W = np.asarray(W, dtype=np.float64)
    gram = W.T @ W if W.shape[1] <= W.shape[0] else W @ W.T
    lam, _ = power_iteration(gram, iters=iters, tol=tol)
    return float(np.sqrt(lam))


@dataclass(frozen=True)
class CurvatureBounds:
    """``m <= eig(Hessian) <= M`` and ``|eig| <= K`` for the (y, t) margin.

    ``radius``/``center`` are set for local bounds and ``None`` for global ones.
    """

    m: float
    M: float
    K: float
    y: int
    t: int
    radius: Optional[float] = None
    center: Optional[np.ndarray] = None

    @property
    def is_local(self) -> bool:
        return self.radius is not None


def _psd_sum_top(W1: np.ndarray, c: np.ndarray) -> float:
    """Top eigenvalue of ``W1^T diag(c) W1`` for ``c >= 0``.

    Uses the N1 x N1 form ``diag(sqrt c) W1 W1^T diag(sqrt c)`` when it is
    smaller; both share their nonzero spectrum.
    """
    if W1.shape[0] < W1.shape[1]:
        sc = np.sqrt(c)
        A = (sc[:, None] * W1) @ (W1.T * sc[None, :])
    else:
        A = W1.T @ (c[:, None] * W1)
    lam, _ = power_iteration(A, iters=BOUND_ITERS, tol=BOUND_TOL)
    return lam


def _pn_bounds(W1: np.ndarray, diff: np.ndarray, p: np.ndarray, n: np.ndarray):
    """``lambda_min(N)`` and ``lambda_max(P)`` for coefficient vectors p, n.

    Requires ``p * diff >= 0`` and ``n * diff <= 0`` (P PSD, N NSD).
    """
    cp = np.maximum(p * diff, 0.0)
    cn = np.maximum(-(n * diff), 0.0)
    # 0.0 - x rather than -x so a zero bound prints as 0, not -0
    return 0.0 - _psd_sum_top(W1, cn), _psd_sum_top(W1, cp)


def _pn_coefficients(diff, lo, hi):
    # p follows the upper s'' bound where the row difference is >= 0, the
    # lower one where it is < 0; n does the opposite
    pos = diff >= 0
    p = np.where(pos, hi, lo)
    n = np.where(pos, lo, hi)
    return p, n


def deep_bound(net: Mlp, y: int, t: int, norms: Optional[list] = None) -> float:
    """K(W, y, t): bound on the spectral norm of the margin Hessian, any depth.

    ``norms`` optionally supplies per-layer spectral norm estimates (used by
    training, which keeps them in a persistent power-iteration state).
    """
    _check_pair(net, y, t)
    prof = profile(net.activation)
    g, h = prof.g, prof.h
    W = net.weights
    L = net.depth
    if norms is None:
        norms = [spectral_norm(Wi) for Wi in W[:-1]]
    r = []
    for I in range(1, L):
        r.append(norms[0] if I == 1 else g * norms[I - 1] * r[-1])

    # s_I = g^(L-1-I) |w_y - w_t| |W^(L-1)| ... |W^(I+1)|, a length-N_I row
    s = np.abs(W[-1][y] - W[-1][t])
    total = h * r[L - 2] ** 2 * float(np.max(s))
    for I in range(L - 2, 0, -1):
        s = g * (s @ np.abs(W[I]))
        total += h * r[I - 1] ** 2 * float(np.max(s))
    return float(total)


def two_layer_bounds(net: Mlp, y: int, t: int) -> CurvatureBounds:
    if net.depth != 2:
        raise ValueError(f"two_layer_bounds needs a 2-layer net, got depth {net.depth}")
    _check_pair(net, y, t)
    prof = profile(net.activation)
    W1, W2 = net.weights
    diff = W2[y] - W2[t]
    N1 = W1.shape[0]
    p, n = _pn_coefficients(diff, np.full(N1, prof.h_L), np.full(N1, prof.h_U))
    m, M = _pn_bounds(W1, diff, p, n)
    K = deep_bound(net, y, t)
    # both are valid bounds; the clip only bites at rounding level (one hidden unit)
    return CurvatureBounds(m=max(m, 0.0 - K), M=min(M, K), K=K, y=y, t=t)


def global_bounds(net: Mlp, y: int, t: int) -> CurvatureBounds:
    """(m, M) from the two-layer bound when available, otherwise -K and K."""
    if net.depth == 2:
        return two_layer_bounds(net, y, t)
    K = deep_bound(net, y, t)
    return CurvatureBounds(m=0.0 - K, M=K, K=K, y=y, t=t)


def preactivation_box(net: Mlp, x0, rho: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-neuron interval of the first-layer pre-activation over the l2 ball."""
    W1, b1 = net.layers[0].W, net.layers[0].b
    center = W1 @ np.asarray(x0, dtype=np.float64) + b1
    spread = rho * np.linalg.norm(W1, axis=1)
    return center - spread, center + spread


def local_two_layer_bounds(net: Mlp, y: int, t: int, x0, rho: float) -> CurvatureBounds:
    """(m, M) valid on the ball of radius ``rho`` around ``x0``.

    K is ``max(|m|, |M|)``, which is itself a valid local spectral bound.
    """
    if net.depth != 2:
        raise ValueError("local bounds are only available for 2-layer nets")
    if not rho >= 0:
        raise ValueError(f"radius must be non-negative, got {rho}")
    _check_pair(net, y, t)
    W1, W2 = net.weights
    diff = W2[y] - W2[t]
    d, u = preactivation_box(net, x0, rho)
    lo, hi = second_deriv_range_array(net.activation, d, u)
    p, n = _pn_coefficients(diff, lo, hi)
    # clip so P stays PSD and N NSD; still valid bounds since
    # p*diff >= s''*diff and n*diff <= s''*diff keep holding
    pos = diff >= 0
    p = np.where(pos, np.maximum(p, 0.0), np.minimum(p, 0.0))
    n = np.where(pos, np.minimum(n, 0.0), np.maximum(n, 0.0))
    m, M = _pn_bounds(W1, diff, p, n)
    return CurvatureBounds(
        m=m, M=M, K=max(abs(m), abs(M)), y=y, t=t,
        radius=float(rho), center=np.array(x0, dtype=np.float64),
    )
