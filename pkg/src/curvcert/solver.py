"""Dual certificate and dual attack solvers.

Both problems are solved by bisection on the dual variable ``eta`` with an
inner majorization-minimization loop whose quadratic upper bound uses the
curvature bound K.  Within the convex ``eta`` range every inner problem is
convex, so the inner loop converges to its global minimizer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .curvature import CurvatureBounds, global_bounds, local_two_layer_bounds
from .diff import value_and_grad_margin
from .network import Mlp, _check_pair, margin

log = logging.getLogger(__name__)

OUTER_STEPS = 30
INNER_STEPS = 20
INNER_TOL = 1e-5
TIGHT_TOL = 1e-3
BOUNDARY_TOL = 1e-3
ATTACK_ETA_SCALE = 20.0
_MAX_DOUBLINGS = 80


class DivergenceError(FloatingPointError):
    """Raised when an inner iterate becomes non-finite."""


@dataclass
class CertificateResult:
    radius: float
    x_cert: np.ndarray
    eta: float
    margin_at_x: float
    tight: bool
    bounds_used: Optional[CurvatureBounds]
    residual: float = math.nan


@dataclass
class AttackResult:
    x_attack: np.ndarray
    eta: float
    margin_at_x: float
    on_boundary: bool
    radius_requested: float
    bounds_used: Optional[CurvatureBounds] = None
    residual: float = math.nan
    eta_pinned: bool = False


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise DivergenceError("inner iterate became non-finite")


def _stay_inside(x, x_new, x0, safe_radius):
    """Halve the step from ``x`` towards ``x_new`` until it lies in the ball."""
    limit = safe_radius * (1.0 + 1e-12)
    step = x_new - x
    alpha = 1.0
    cand = x_new
    while np.linalg.norm(cand - x0) > limit:
        alpha *= 0.5
        if alpha < 2.0**-60:
            return x
        cand = x + alpha * step
    return cand


def _inner_cert(net, x0, y, t, eta, K, x_init, max_iters, tol, history, safe_radius):
    x = x0.copy() if x_init is None else x_init.copy()
    c = abs(eta * K)
    f, g = value_and_grad_margin(net, x, y, t)
    for _ in range(max_iters):
        if history is not None:
            history.append(0.5 * float(np.sum((x - x0) ** 2)) + eta * f)
        if np.linalg.norm(eta * g + (x - x0)) < tol:
            break
        x_new = -(eta * g - c * x - x0) / (1.0 + c)
        if safe_radius is not None:
            x_new = _stay_inside(x, x_new, x0, safe_radius)
        _check_finite(x_new)
        x = x_new
        f, g = value_and_grad_margin(net, x, y, t)
    if history is not None:
        history.append(0.5 * float(np.sum((x - x0) ** 2)) + eta * f)
    residual = float(np.linalg.norm(eta * g + (x - x0)))
    return x, f, residual


def inner_cert(net: Mlp, x0, y: int, t: int, eta: float, K: float,
               max_iters: int = INNER_STEPS, tol: float = INNER_TOL, *,
               x_init=None, history: Optional[list] = None,
               safe_radius: Optional[float] = None) -> np.ndarray:
    """Approximate minimizer of ``0.5 ||x - x0||^2 + eta * f(x)``.

    ``history``, when given, receives the objective at every iterate.
    ``safe_radius`` confines iterates to a ball around ``x0`` by step halving.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x, _, _ = _inner_cert(net, x0, y, t, eta, K, x_init, max_iters, tol, history, safe_radius)
    return x


def _inner_attack(net, x0, y, t, eta, K, x_init, max_iters, tol, history):
    x = x0.copy() if x_init is None else x_init.copy()
    f, g = value_and_grad_margin(net, x, y, t)
    denom = K + eta
    for _ in range(max_iters):
        if history is not None:
            history.append(f + 0.5 * eta * float(np.sum((x - x0) ** 2)))
        if np.linalg.norm(g + eta * (x - x0)) < tol or denom <= 0.0:
            break
        x_new = -(g - K * x - eta * x0) / denom
        _check_finite(x_new)
        x = x_new
        f, g = value_and_grad_margin(net, x, y, t)
    if history is not None:
        history.append(f + 0.5 * eta * float(np.sum((x - x0) ** 2)))
    return x, f, float(np.linalg.norm(g + eta * (x - x0)))


def inner_attack(net: Mlp, x0, y: int, t: int, eta: float, K: float,
                 max_iters: int = INNER_STEPS, tol: float = INNER_TOL, *,
                 x_init=None, history: Optional[list] = None) -> np.ndarray:
    """Approximate minimizer of ``f(x) + eta/2 ||x - x0||^2`` (the constant
    ``-eta rho^2 / 2`` is dropped; it does not move the minimizer)."""
    x0 = np.asarray(x0, dtype=np.float64)
    x, _, _ = _inner_attack(net, x0, y, t, eta, K, x_init, max_iters, tol, history)
    return x


def cert_eta_range(bounds: CurvatureBounds) -> tuple[float, Optional[float]]:
    """Convex range ``[-1/M, -1/m]`` clipped to usable values.

    Negative eta never reaches the boundary from a correctly classified
    point, so an unbounded lower end is replaced by 0.  ``None`` as upper
    end means the range is unbounded above (m = 0).
    """
    lo = -1.0 / bounds.M if bounds.M > 0 else 0.0
    hi = -1.0 / bounds.m if bounds.m < 0 else None
    return lo, hi


def certify(net: Mlp, x0, y: int, t: int, bounds: Optional[CurvatureBounds] = None, *,
            outer_steps: int = OUTER_STEPS, inner_steps: int = INNER_STEPS,
            tol: float = INNER_TOL, warm_start: bool = True,
            tight_tol: float = TIGHT_TOL, safe_radius: Optional[float] = None,
            history: Optional[list] = None) -> CertificateResult:
    """Curvature-based robustness certificate for the (y, t) margin at ``x0``.

    Returns the last inner solution that is still on the ``y`` side of the
    boundary; for such a point ``||x - x0||`` is a lower bound on the
    distance to the decision boundary.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    _check_pair(net, y, t)
    f0 = margin(net, x0, y, t)
    if f0 <= 0.0:
        if f0 < 0.0:
            log.debug("input already misclassified towards %d (margin %.3g)", t, f0)
        return CertificateResult(0.0, x0.copy(), 0.0, f0, f0 == 0.0, bounds)
    if bounds is None:
        bounds = global_bounds(net, y, t)
    K = bounds.K

    x = x0.copy()
    best = None  # (x, eta, f, residual) on the correct side

    def solve(eta, start):
        return _inner_cert(net, x0, y, t, eta, K, start if warm_start else None,
                           inner_steps, tol, history, safe_radius)

    eta_lo, eta_hi = cert_eta_range(bounds)
    if eta_hi is None:
        # unbounded above: grow until the inner solution crosses the boundary
        eta_hi = max(1.0, 2.0 * eta_lo)
        for _ in range(_MAX_DOUBLINGS):
            x, f, res = solve(eta_hi, x)
            if f <= 0.0:
                break
            best = (x, eta_hi, f, res)
            eta_lo, eta_hi = eta_hi, 2.0 * eta_hi

    eta = 0.5 * (eta_lo + eta_hi)
    for _ in range(outer_steps):
        x, f, res = solve(eta, x)
        if f > 0.0:
            eta_lo = eta
            best = (x, eta, f, res)
        else:
            eta_hi = eta
        eta = 0.5 * (eta_lo + eta_hi)

    if best is None:
        return CertificateResult(0.0, x0.copy(), 0.0, f0, False, bounds)
    xc, eta_c, fc, res_c = best
    return CertificateResult(
        radius=float(np.linalg.norm(xc - x0)), x_cert=xc, eta=float(eta_c),
        margin_at_x=float(fc), tight=bool(abs(fc) <= tight_tol),
        bounds_used=bounds, residual=res_c,
    )


def attack(net: Mlp, x0, y: int, t: int, rho: float, bounds: Optional[CurvatureBounds] = None, *,
           outer_steps: int = OUTER_STEPS, inner_steps: int = INNER_STEPS,
           tol: float = INNER_TOL, warm_start: bool = True,
           boundary_tol: float = BOUNDARY_TOL, history: Optional[list] = None) -> AttackResult:
    """Curvature-based attack: minimize the (y, t) margin over the l2 ball of radius ``rho``."""
    if not rho > 0:
        raise ValueError(f"attack radius must be positive, got {rho}")
    x0 = np.asarray(x0, dtype=np.float64)
    _check_pair(net, y, t)
    if bounds is None:
        bounds = global_bounds(net, y, t)
    m, K = bounds.m, bounds.K
    eta_lo = max(-m, 0.0)
    eta_hi = ATTACK_ETA_SCALE * (1.0 - m)
    eta_cap = eta_hi

    def solve(eta, start):
        return _inner_attack(net, x0, y, t, eta, K, start if warm_start else None,
                             inner_steps, tol, history)

    x = x0.copy()
    inside = None
    eta = 0.5 * (eta_lo + eta_hi)
    for _ in range(outer_steps):
        x, f, res = solve(eta, x)
        if np.linalg.norm(x - x0) < rho:
            eta_hi = eta
            inside = (x, eta, f, res)
        else:
            eta_lo = eta
        eta = 0.5 * (eta_lo + eta_hi)

    pinned = False
    if inside is None:
        xs, f, res = solve(eta_cap, x)
        if np.linalg.norm(xs - x0) <= rho:
            inside = (xs, eta_cap, f, res)
        else:
            pinned = True
            log.warning("attack bisection pinned at eta_max=%.4g; projecting onto the ball", eta_cap)
            dist = np.linalg.norm(xs - x0)
            xs = x0 + (xs - x0) * (rho / dist)
            fs, _ = value_and_grad_margin(net, xs, y, t)
            inside = (xs, eta_cap, fs, math.nan)

    xa, eta_a, fa, res_a = inside
    dist = float(np.linalg.norm(xa - x0))
    return AttackResult(
        x_attack=xa, eta=float(eta_a), margin_at_x=float(fa),
        # a projected point is feasible but not a dual solution, so it
        # carries no optimality guarantee
        on_boundary=bool(abs(dist - rho) <= boundary_tol * rho and not pinned),
        radius_requested=float(rho), bounds_used=bounds, residual=res_a,
        eta_pinned=pinned,
    )


def certify_local(net: Mlp, x0, y: int, t: int, refinements: int = 5,
                  global_result: Optional[CertificateResult] = None, **kw) -> CertificateResult:
    """Refine a global certificate with curvature bounds that hold on a ball.

    Each round grows the ball to the radius the local bounds suggest, then
    re-solves with bounds valid on that larger ball while keeping iterates
    inside it.  The returned radius is the best sound value found, so it
    never falls below the global certificate.
    """
    if net.depth != 2:
        raise ValueError("local certificates are only available for 2-layer nets")
    x0 = np.asarray(x0, dtype=np.float64)
    best = global_result if global_result is not None else certify(net, x0, y, t, **kw)
    R = best.radius
    for _ in range(refinements):
        if R <= 0.0:
            break
        candidate = certify(net, x0, y, t, local_two_layer_bounds(net, y, t, x0, R), **kw)
        R_next = max(candidate.radius, R)
        if R_next <= R * (1.0 + 1e-12):
            break
        checked = certify(net, x0, y, t, local_two_layer_bounds(net, y, t, x0, R_next),
                          safe_radius=R_next, **kw)
        if checked.radius > best.radius:
            best = checked
        R = R_next
    return best
