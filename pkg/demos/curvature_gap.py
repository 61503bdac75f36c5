"""How loose is the closed-form curvature bound as networks get deeper?

For random sigmoid nets of depth 2, 3 and 4 this compares the bound K with the
largest Hessian eigenvalue seen over many random inputs (a lower estimate of
the true curvature).  Depth 2 also reports the sharper (m, M) pair.
"""
import numpy as np

from curvcert import deep_bound, two_layer_bounds
from curvcert.diff import hessian_margin_batch
from curvcert.network import glorot_uniform

rng = np.random.default_rng(0)
D = 16
X = rng.standard_normal((4000, D)) * 2.0

print(f"{'depth':>5} {'K (bound)':>12} {'sampled max':>12} {'ratio':>8}")
for depth in (2, 3, 4):
    ratios = []
    for trial in range(5):
        net = glorot_uniform([D] + [32] * (depth - 1) + [10], "sigmoid", rng)
        K = deep_bound(net, 0, 1)
        ev = np.linalg.eigvalsh(hessian_margin_batch(net, X, 0, 1))
        seen = np.abs(ev).max()
        ratios.append(K / seen)
        if trial == 0:
            print(f"{depth:>5} {K:>12.4g} {seen:>12.4g} {K / seen:>8.1f}")
    print(f"{'':>5} median ratio over 5 nets: {np.median(ratios):.1f}")

net = glorot_uniform([D, 32, 10], "sigmoid", rng)
b = two_layer_bounds(net, 0, 1)
ev = np.linalg.eigvalsh(hessian_margin_batch(net, X, 0, 1))
print(f"\ndepth 2, eigenvalue range seen [{ev.min():.4g}, {ev.max():.4g}] "
      f"inside [m, M] = [{b.m:.4g}, {b.M:.4g}], K = {b.K:.4g}")
