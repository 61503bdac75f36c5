"""Certify and attack a 2-input network, then check both answers by brute force.

With two inputs the whole disc around a point can be gridded, so the solver
output can be compared against an exhaustive search.
"""
import numpy as np

from curvcert import attack, certify, global_bounds
from curvcert.network import Mlp


def grid_disc(net, x0, y, t, radius, n=801):
    g = np.linspace(-radius, radius, n)
    P = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    d = np.linalg.norm(P, axis=1)
    P, d = P[d <= radius] + x0, d[d <= radius]
    Z = net.logits(P)
    return Z[:, y] - Z[:, t], d


rng = np.random.default_rng(5)
net = Mlp.from_arrays(
    [2.0 * rng.standard_normal((8, 2)) / np.sqrt(2), 2.0 * rng.standard_normal((3, 8)) / np.sqrt(8)],
    [rng.standard_normal(8), rng.standard_normal(3)],
    "tanh",
)
x0 = np.array([0.4, -0.3])
z = net.logits(x0)
y, t = int(np.argmax(z)), int(np.argsort(-z)[1])
b = global_bounds(net, y, t)
print(f"label {y}, runner-up {t}, margin {z[y] - z[t]:.4f}")
print(f"curvature bounds: m = {b.m:.4f}, M = {b.M:.4f}, K = {b.K:.4f}")

# certificate: the closest point where the runner-up catches up
c = certify(net, x0, y, t)
print(f"\ncertified radius {c.radius:.5f} (eta {c.eta:.4f}, margin there {c.margin_at_x:.2e}, tight: {c.tight})")
f, d = grid_disc(net, x0, y, t, 1.5 * c.radius)
closest = d[f <= 0].min() if np.any(f <= 0) else np.inf
print(f"grid search: closest point with margin <= 0 is at distance {closest:.5f}")

# attack: the lowest margin reachable inside a ball of radius rho
# past some radius the attack can no longer prove optimality and says so
for rho in (0.1, 0.3, 0.6):
    a = attack(net, x0, y, t, rho)
    f, _ = grid_disc(net, x0, y, t, rho)
    print(f"rho {rho}: dual attack margin {a.margin_at_x:.5f} (on boundary: {a.on_boundary}), "
          f"grid minimum {f.min():.5f}")
