"""Curvature-based l2 robustness certificates for smooth fully connected networks."""

from .activation import ActivationKind, ActivationProfile, act_eval, profile, second_deriv_range
from .network import DenseLayer, ForwardTrace, Mlp, forward, glorot_uniform, margin, runner_up_target
from .diff import JacobianStack, fd_hessian, grad_margin, hessian_margin, jacobian_stack
from .curvature import (
    CurvatureBounds,
    deep_bound,
    global_bounds,
    local_two_layer_bounds,
    power_iteration,
    two_layer_bounds,
)
from .solver import AttackResult, CertificateResult, attack, certify, certify_local, inner_attack, inner_cert

__version__ = "0.1.0"
