"""Smooth activations, their derivatives, and global/local bounds on them.

All three supported kinds are twice continuously differentiable, which is
what makes the Hessian of a network well defined everywhere.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Union

import numpy as np

ArrayLike = Union[float, np.ndarray]


class ActivationKind(str, enum.Enum):
    SIGMOID = "sigmoid"
    TANH = "tanh"
    SOFTPLUS = "softplus"

    @classmethod
    def parse(cls, value: "str | ActivationKind") -> "ActivationKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(
                f"unknown activation {value!r}; expected one of "
                f"{', '.join(k.value for k in cls)}"
            ) from None


@dataclass(frozen=True)
class ActivationProfile:
    """Global derivative bounds of an activation.

    ``g`` bounds ``|s'|``, ``h`` bounds ``|s''|`` and ``h_L <= s'' <= h_U``.
    """

    g: float
    h: float
    h_U: float
    h_L: float


def _sigmoid(x):
    # exp(-|x|) never overflows; both branches are exact rearrangements
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def act_eval(kind, x: ArrayLike, order: int = 0) -> ArrayLike:
    """Evaluate the activation (order 0) or its first/second derivative.

    Works elementwise on arrays; returns a Python float for scalar input.
    """
    kind = ActivationKind.parse(kind)
    scalar = np.ndim(x) == 0
    x = np.asarray(x, dtype=np.float64)
    if order not in (0, 1, 2):
        raise ValueError(f"order must be 0, 1 or 2, got {order}")

    if kind is ActivationKind.SIGMOID:
        s = _sigmoid(x)
        if order == 0:
            out = s
        elif order == 1:
            out = s * (1.0 - s)
        else:
            out = s * (1.0 - s) * (1.0 - 2.0 * s)
    elif kind is ActivationKind.TANH:
        th = np.tanh(x)
        if order == 0:
            out = th
        elif order == 1:
            out = (1.0 - th) * (1.0 + th)
        else:
            out = -2.0 * th * (1.0 - th) * (1.0 + th)
    else:
        if order == 0:
            out = _softplus(x)
        else:
            s = _sigmoid(x)
            out = s if order == 1 else s * (1.0 - s)

    return float(out) if scalar else out


# Extreme values of s'' in closed form. Sigmoid: at S(x) = (3 -/+ sqrt 3)/6,
# giving +/- 1/(6 sqrt 3). Tanh: at tanh(x) = -/+ 1/sqrt 3, giving
# +/- 4/(3 sqrt 3). Softplus: s'' = S(1-S) peaks at x = 0 with 1/4.
_SQRT3 = np.sqrt(3.0)
_SIGMOID_H = 1.0 / (6.0 * _SQRT3)
_TANH_H = 4.0 / (3.0 * _SQRT3)

_PROFILES = {
    ActivationKind.SIGMOID: ActivationProfile(g=0.25, h=_SIGMOID_H, h_U=_SIGMOID_H, h_L=-_SIGMOID_H),
    ActivationKind.TANH: ActivationProfile(g=1.0, h=_TANH_H, h_U=_TANH_H, h_L=-_TANH_H),
    ActivationKind.SOFTPLUS: ActivationProfile(g=1.0, h=0.25, h_U=0.25, h_L=0.0),
}


def profile(kind) -> ActivationProfile:
    return _PROFILES[ActivationKind.parse(kind)]


def _critical_points(kind: ActivationKind) -> np.ndarray:
    """Abscissae where s'' attains its global extrema."""
    if kind is ActivationKind.SIGMOID:
        # S(x) = a  <=>  x = log(a / (1 - a))
        a = np.array([(3.0 - _SQRT3) / 6.0, (3.0 + _SQRT3) / 6.0])
        return np.log(a / (1.0 - a))
    if kind is ActivationKind.TANH:
        return np.arctanh(np.array([-1.0 / _SQRT3, 1.0 / _SQRT3]))
    return np.array([0.0])


def second_deriv_range(kind, lo: float, hi: float) -> tuple[float, float]:
    """Exact ``(min, max)`` of s'' over the closed interval ``[lo, hi]``.

    Infinite endpoints are allowed. s'' has finitely many critical points,
    so the extrema are among the endpoints and the interior critical points.
    """
    kind = ActivationKind.parse(kind)
    if not lo <= hi:
        raise ValueError(f"invalid interval [{lo}, {hi}]")
    prof = profile(kind)
    candidates = []
    for c in _critical_points(kind):
        if lo <= c <= hi:
            candidates.append(act_eval(kind, c, 2))
    for end in (lo, hi):
        # s'' -> 0 at +/- infinity for every supported kind
        candidates.append(act_eval(kind, end, 2) if np.isfinite(end) else 0.0)
    lo_val, hi_val = min(candidates), max(candidates)
    # snap interior extrema onto the tabulated constants so that a saturated
    # interval reproduces the global profile bit for bit
    if any(lo <= c <= hi for c in _critical_points(kind)):
        lo_val = prof.h_L if np.isclose(lo_val, prof.h_L, rtol=1e-12, atol=0) else lo_val
        hi_val = prof.h_U if np.isclose(hi_val, prof.h_U, rtol=1e-12, atol=0) else hi_val
    return float(lo_val), float(hi_val)


def second_deriv_range_array(kind, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`second_deriv_range` over per-neuron intervals."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    pairs = [second_deriv_range(kind, a, b) for a, b in zip(lo.ravel(), hi.ravel())]
    out = np.array(pairs, dtype=np.float64).reshape(lo.shape + (2,))
    return out[..., 0], out[..., 1]
