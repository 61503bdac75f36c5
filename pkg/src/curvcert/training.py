"""Curvature-regularized training, a PGD baseline, and the evaluation protocol.

The per-sample training loss is cross-entropy plus ``gamma * K(W, y, t)``
with t the runner-up class.  Spectral norms inside K are tracked with one
persisted power step per update, so their gradient is the rank-one ``u v^T``.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .activation import act_eval, profile
from .curvature import deep_bound, global_bounds, spectral_norm
from .data_io import Dataset, append_jsonl
from .diff import hessian_spectral_norm
from .network import Mlp, _check_pair
from .solver import attack, certify, certify_local

log = logging.getLogger(__name__)

MODES = ("standard", "curvature_only", "crt")
OPTIMIZERS = ("sgd", "adam")


class TrainingDivergence(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.0
    rho: float = 0.0
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 0.1
    mode: str = "standard"
    seed: int = 0
    optimizer: str = "sgd"
    attack_every: int = 1
    power_steps: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not self.gamma >= 0:
            raise ValueError("gamma must be >= 0")
        if not self.rho >= 0:
            raise ValueError("rho must be >= 0")
        if self.mode == "crt" and not self.rho > 0:
            raise ValueError("crt mode needs rho > 0")
        if self.mode == "standard" and self.gamma != 0:
            raise ValueError("standard mode trains plain cross-entropy; use curvature_only for gamma > 0")
        if self.epochs < 0 or self.batch_size < 1 or self.attack_every < 1 or self.power_steps < 1:
            raise ValueError("epochs >= 0, batch_size >= 1, attack_every >= 1, power_steps >= 1 required")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


# ---------------------------------------------------------------- spectral norms

@dataclass
class SpectralState:
    """Persisted singular pair ``W v = sigma u`` for one weight matrix."""

    u: np.ndarray
    v: np.ndarray
    sigma: float = 0.0

    @classmethod
    def fresh(cls, W, rng: np.random.Generator) -> "SpectralState":
        W = np.asarray(W, dtype=np.float64)
        u = rng.standard_normal(W.shape[0])
        u /= np.linalg.norm(u)
        v = W.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            v = np.zeros(W.shape[1])
            v[0] = 1.0
        else:
            v /= nv
        return cls(u, v, float(np.linalg.norm(W @ v)))


def spectral_norm_grad(W, state: SpectralState, steps: int = 1):
    """One (or ``steps``) power steps on the persisted pair.

    Returns ``(sigma, u v^T, new_state)``; ``state`` itself is not modified.
    """
    W = np.asarray(W, dtype=np.float64)
    if state.u.shape != (W.shape[0],) or state.v.shape != (W.shape[1],):
        raise ValueError("spectral state does not match the matrix shape")
    u, v = state.u, state.v
    sigma = state.sigma
    for _ in range(steps):
        v_new = W.T @ u
        nv = np.linalg.norm(v_new)
        if nv == 0.0:
            return 0.0, np.zeros_like(W), SpectralState(u.copy(), v.copy(), 0.0)
        v = v_new / nv
        u_new = W @ v
        sigma = float(np.linalg.norm(u_new))
        if sigma == 0.0:
            return 0.0, np.zeros_like(W), SpectralState(u.copy(), v, 0.0)
        u = u_new / sigma
    return sigma, np.outer(u, v), SpectralState(u, v, sigma)


# ---------------------------------------------------------------- losses

def _forward_batch(net: Mlp, X):
    zs, acts = [], [X]
    a = X
    for I, layer in enumerate(net.layers):
        z = a @ layer.W.T + layer.b
        zs.append(z)
        if I < net.depth - 1:
            a = act_eval(net.activation, z, 0)
            acts.append(a)
    return zs, acts


def _softmax_xent(logits, Y):
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    n = logits.shape[0]
    losses = lse - shifted[np.arange(n), Y]
    probs = np.exp(shifted - lse[:, None])
    probs[np.arange(n), Y] -= 1.0
    return losses, probs


def cross_entropy(net: Mlp, X, Y):
    """Mean cross-entropy and its parameter gradients ``[(dW, db), ...]``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_1d(np.asarray(Y, dtype=np.int64))
    zs, acts = _forward_batch(net, X)
    losses, delta = _softmax_xent(zs[-1], Y)
    delta /= X.shape[0]
    grads = [None] * net.depth
    for I in range(net.depth - 1, -1, -1):
        grads[I] = (delta.T @ acts[I], delta.sum(axis=0))
        if I > 0:
            delta = (delta @ net.weights[I]) * act_eval(net.activation, zs[I - 1], 1)
    return float(losses.mean()), grads


def deep_bound_and_grad(net: Mlp, y: int, t: int, norms, outers):
    """K(W, y, t) and dK/dW for every layer.

    ``norms[k]`` / ``outers[k]`` are the spectral norm of W^(k+1) and its
    gradient ``u v^T``.  Subgradients: argmax picks the first maximizer and
    ``d|w|/dw`` is 0 at 0.
    """
    _check_pair(net, y, t)
    prof = profile(net.activation)
    g, h = prof.g, prof.h
    W = net.weights
    L = net.depth

    r2 = []
    r = norms[0]
    r2.append(r * r)
    for I in range(2, L):
        r = g * norms[I - 1] * r
        r2.append(r * r)

    diff = W[-1][y] - W[-1][t]
    s = [None] * (L - 1)
    s[L - 2] = np.abs(diff)
    for I in range(L - 2, 0, -1):
        s[I - 1] = g * (s[I] @ np.abs(W[I]))
    jstar = [int(np.argmax(si)) for si in s]
    mx = [float(si[j]) for si, j in zip(s, jstar)]
    K = h * sum(r2[i] * mx[i] for i in range(L - 1))

    dW = [np.zeros_like(Wi) for Wi in W]
    # through the norms: r_I^2 carries norm_k^2 for every k <= I
    for k in range(1, L):
        nk = norms[k - 1]
        if nk == 0.0:
            continue
        coef = sum(2.0 * h * mx[I - 1] * r2[I - 1] / nk for I in range(k, L))
        dW[k - 1] += coef * outers[k - 1]
    # through the max entries of the propagated rows
    ds = [np.zeros_like(si) for si in s]
    for i in range(L - 1):
        ds[i][jstar[i]] += h * r2[i]
    for I in range(1, L - 1):
        absW = np.abs(W[I])
        dW[I] += g * np.outer(s[I], ds[I - 1]) * np.sign(W[I])
        ds[I] += g * (absW @ ds[I - 1])
    sg = np.sign(diff) * ds[L - 2]
    dW[-1][y] += sg
    dW[-1][t] -= sg
    return float(K), dW


def _converged_states(net: Mlp, rng=None, tol: float = 1e-14, max_steps: int = 20000):
    rng = np.random.default_rng(0) if rng is None else rng
    states = []
    for W in net.weights[:-1]:
        st = SpectralState.fresh(W, rng)
        prev = -1.0
        for _ in range(max_steps):
            sigma, _, st = spectral_norm_grad(W, st)
            if abs(sigma - prev) <= tol * max(sigma, 1e-300):
                break
            prev = sigma
        states.append(st)
    return states


def batch_loss(net: Mlp, X, Y, T, gamma: float, states=None):
    """Mean over the batch of ``CE(x_i, y_i) + gamma K(W, y_i, t_i)``.

    ``states`` are the current spectral states of layers 1..L-1 (used as-is,
    no power step is taken here).  Returns ``(loss, grads, mean_K)``.
    """
    ce, grads = cross_entropy(net, X, Y)
    if gamma == 0.0:
        return ce, grads, math.nan
    if states is None:
        states = _converged_states(net)
    norms = [st.sigma for st in states]
    outers = [np.outer(st.u, st.v) for st in states]
    Y = np.atleast_1d(Y)
    T = np.atleast_1d(T)
    pairs, counts = np.unique(np.stack([Y, T], axis=1), axis=0, return_counts=True)
    n = Y.shape[0]
    total_K = 0.0
    for (y, t), c in zip(pairs, counts):
        K, dW = deep_bound_and_grad(net, int(y), int(t), norms, outers)
        w = gamma * c / n
        total_K += K * c
        for I in range(net.depth):
            grads[I] = (grads[I][0] + w * dW[I], grads[I][1])
    mean_K = float(total_K / n)
    return ce + gamma * mean_K, grads, mean_K


def crt_loss(net: Mlp, x0, y: int, t_target: int, gamma: float, attack_point=None, states=None):
    """Single-sample loss ``CE + gamma K(W, y, t_target)`` and its gradients.

    Cross-entropy is evaluated at ``attack_point`` when given, else at ``x0``.
    """
    if y == t_target:
        raise ValueError("target class must differ from the label")
    x = x0 if attack_point is None else attack_point
    loss, grads, _ = batch_loss(net, np.atleast_2d(x), np.array([y]), np.array([t_target]), gamma, states)
    return loss, grads


# ---------------------------------------------------------------- PGD

def _worst_margin(logits, Y):
    z = logits.copy()
    n = z.shape[0]
    zy = z[np.arange(n), Y]
    z[np.arange(n), Y] = -np.inf
    return zy - z.max(axis=1)


def pgd_batch(net: Mlp, X0, Y, rho: float, steps: int = 40, step_size: Optional[float] = None,
              restarts: int = 1, rng: Optional[np.random.Generator] = None):
    """Batched l2 PGD on cross-entropy; returns the lowest-margin point seen per row."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    X0 = np.atleast_2d(np.asarray(X0, dtype=np.float64))
    Y = np.atleast_1d(np.asarray(Y, dtype=np.int64))
    step_size = rho / 10.0 if step_size is None else step_size
    rng = np.random.default_rng(0) if rng is None else rng
    n, D = X0.shape
    best = X0.copy()
    best_m = _worst_margin(net.logits(X0), Y)
    if steps == 0:
        return best
    starts = [X0.copy()]
    for _ in range(restarts):
        d = rng.standard_normal((n, D))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        radius = rho * rng.uniform(size=(n, 1)) ** (1.0 / D)
        starts.append(X0 + radius * d)
    for X in starts:
        for _ in range(steps):
            zs, acts = _forward_batch(net, X)
            _, delta = _softmax_xent(zs[-1], Y)
            for I in range(net.depth - 1, -1, -1):
                delta = delta @ net.weights[I]
                if I > 0:
                    delta = delta * act_eval(net.activation, zs[I - 1], 1)
            gn = np.linalg.norm(delta, axis=1, keepdims=True)
            X = X + step_size * np.divide(delta, gn, out=np.zeros_like(delta), where=gn > 0)
            off = X - X0
            on = np.linalg.norm(off, axis=1, keepdims=True)
            X = X0 + off * np.minimum(1.0, rho / np.maximum(on, 1e-300))
            m = _worst_margin(net.logits(X), Y)
            better = m < best_m
            best[better] = X[better]
            best_m[better] = m[better]
    return best


def pgd_attack(net: Mlp, x0, y: int, rho: float, steps: int = 40, step_size: Optional[float] = None,
               restarts: int = 1, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """l2 PGD on cross-entropy from ``x0`` plus ``restarts`` random starts in the ball."""
    return pgd_batch(net, np.atleast_2d(x0), np.array([y]), rho, steps, step_size, restarts, rng)[0]


# ---------------------------------------------------------------- training

class _Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        return [(W - self.lr * gW, b - self.lr * gb) for (W, b), (gW, gb) in zip(params, grads)]


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m = self.v = None

    def step(self, params, grads):
        flat = [a for pair in grads for a in pair]
        if self.m is None:
            self.m = [np.zeros_like(a) for a in flat]
            self.v = [np.zeros_like(a) for a in flat]
        self.t += 1
        out = []
        for i, (p, gr) in enumerate(zip([a for pair in params for a in pair], flat)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * gr
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * gr * gr
            mh = self.m[i] / (1 - self.b1**self.t)
            vh = self.v[i] / (1 - self.b2**self.t)
            out.append(p - self.lr * mh / (np.sqrt(vh) + self.eps))
        return list(zip(out[0::2], out[1::2]))


def runner_up_targets(net: Mlp, X) -> np.ndarray:
    """Runner-up class of every row (lowest index wins ties)."""
    Z = net.logits(np.atleast_2d(X))
    order = np.argsort(-Z, axis=1, kind="stable")
    return order[:, 1].astype(np.int64)


def label_targets(net: Mlp, X, Y) -> np.ndarray:
    """Highest-logit class other than the label; the runner-up for correct rows."""
    Z = net.logits(np.atleast_2d(X)).copy()
    Z[np.arange(Z.shape[0]), Y] = -np.inf
    return np.argmax(Z, axis=1).astype(np.int64)


def mean_curvature_bound(net: Mlp, X, Y) -> float:
    """Mean of K(W, y_i, t_i) over rows, t_i the highest non-label logit."""
    if len(Y) == 0:
        return math.nan
    T = label_targets(net, X, Y)
    cache = {}
    norms = [spectral_norm(W) for W in net.weights[:-1]]
    total = 0.0
    for y, t in zip(Y, T):
        key = (int(y), int(t))
        if key not in cache:
            cache[key] = deep_bound(net, *key, norms=norms)
        total += cache[key]
    return total / len(Y)


def _attack_points(net, X, Y, T, rho):
    out = X.copy()
    for i in range(X.shape[0]):
        if net.logits(X[i]).argmax() != Y[i]:
            # already misclassified: the clean point is its own worst case
            continue
        out[i] = attack(net, X[i], int(Y[i]), int(T[i]), rho).x_attack
    return out


def train(net: Mlp, dataset: Dataset, config: TrainConfig, log_path=None, record_time: bool = True):
    """Minibatch training of the curvature-regularized loss.

    Returns ``(trained_net, metrics)``; one metrics record per epoch, also
    appended to ``log_path`` as json-lines when given.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.dim != net.input_dim or dataset.class_count != net.class_count:
        raise ValueError(
            f"dataset is {dataset.dim}-D with {dataset.class_count} classes, "
            f"net expects {net.input_dim}-D with {net.class_count}"
        )
    rng = np.random.default_rng(config.seed)
    params = [(W.copy(), b.copy()) for W, b in zip(net.weights, net.biases)]
    opt = _Sgd(config.learning_rate) if config.optimizer == "sgd" else _Adam(config.learning_rate)
    use_K = config.mode != "standard" and config.gamma > 0
    states = [SpectralState.fresh(W, rng) for W in net.weights[:-1]] if use_K else None
    X, Y = dataset.images, dataset.labels
    n = len(dataset)
    metrics = []
    step = 0
    current = net
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            Xb, Yb = X[idx], Y[idx]
            T = label_targets(current, Xb, Yb)
            if config.mode == "crt" and step % config.attack_every == 0:
                Xb = _attack_points(current, Xb, Yb, T, config.rho)
            if use_K:
                states = [
                    spectral_norm_grad(W, st, config.power_steps)[2]
                    for W, st in zip(current.weights[:-1], states)
                ]
            loss, grads, mean_K = batch_loss(current, Xb, Yb, T, config.gamma if use_K else 0.0, states)
            if not math.isfinite(loss):
                raise TrainingDivergence(
                    f"non-finite loss at epoch {epoch}, step {step} (mean K {mean_K})"
                )
            params = opt.step(params, grads)
            current = net.replace(weights=[p[0] for p in params], biases=[p[1] for p in params])
            loss_sum += loss * len(idx)
            step += 1
        acc = float(np.mean(np.argmax(current.logits(X), axis=1) == Y))
        rec = {
            "epoch": epoch,
            "loss": loss_sum / n,
            "accuracy": acc,
            "mean_K": mean_curvature_bound(current, X, Y),
            "wall_time": time.perf_counter() - t0 if record_time else None,
        }
        metrics.append(rec)
        log.info("epoch %d loss %.4f acc %.4f mean K %.4g", epoch, rec["loss"], acc, rec["mean_K"])
        if log_path is not None:
            append_jsonl(log_path, rec)
    meta = {
        "gamma": config.gamma, "mode": config.mode, "seed": config.seed, "rho": config.rho,
        "epochs": config.epochs, "optimizer": config.optimizer,
    }
    return current.replace(**meta), metrics


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    count: int
    rho: float
    standard_accuracy: float
    empirical_robust_accuracy: float
    certified_robust_accuracy: float
    attack_success_rate: float
    certificate_success_rate: float
    K_lb: float
    K_ub: float
    mean_crc: float
    refuted_certificates: int = 0
    per_input: list = field(default_factory=list, repr=False)


def _solve_one(args):
    net, x, y, t, rho, local = args
    c = certify(net, x, y, t)
    if local:
        c = certify_local(net, x, y, t, global_result=c)
    a = attack(net, x, y, t, rho)
    return c.radius, c.tight, a.on_boundary, a.margin_at_x


def _map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) < 2:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def evaluate(net: Mlp, dataset: Dataset, rho: float, *, local: bool = False,
             pgd_steps: int = 40, min_pair_count: int = 100, seed: int = 0,
             workers: int = 1) -> EvalReport:
    """Accuracy, PGD and certified accuracy at ``rho``, solver success rates and K_lb/K_ub.

    A sample counts as certified when it is correct, its certificate against
    the runner-up class exceeds ``rho`` and PGD does not break it (the
    certificate only covers one target class, PGD covers all of them).
    """
    n = len(dataset)
    if n == 0:
        return EvalReport(0, rho, 0.0, 0.0, 0.0, 0.0, 0.0, math.nan, math.nan, math.nan)
    if local and net.depth != 2:
        raise ValueError("local certificates are only available for 2-layer nets")
    X, Y = dataset.images, dataset.labels
    Z = net.logits(X)
    pred = np.argmax(Z, axis=1)
    correct = pred == Y
    rng = np.random.default_rng(seed)
    Xp = pgd_batch(net, X, Y, rho, steps=pgd_steps, rng=rng)
    robust = correct & (np.argmax(net.logits(Xp), axis=1) == Y)

    idx = np.flatnonzero(correct)
    T = runner_up_targets(net, X)
    jobs = [(net, X[i], int(Y[i]), int(T[i]), rho, local) for i in idx]
    solved = _map(_solve_one, jobs, workers)
    certified = np.zeros(n, dtype=bool)
    per_input = []
    refuted = 0
    for i, (radius, tight, onb, am) in zip(idx, solved):
        per_input.append({"input_id": int(i), "y": int(Y[i]), "t": int(T[i]), "radius": radius,
                          "tight": tight, "on_boundary": onb, "attack_margin": am})
        if radius > rho:
            if robust[i]:
                certified[i] = True
            else:
                refuted += 1
    if refuted:
        log.warning("%d certificates above rho were broken by PGD through another class", refuted)
    k = len(idx)
    radii = np.array([p["radius"] for p in per_input])

    K_lb, K_ub = _curvature_gap(net, X, Y, min_pair_count)
    return EvalReport(
        count=n, rho=float(rho),
        standard_accuracy=float(correct.mean()),
        empirical_robust_accuracy=float(robust.mean()),
        certified_robust_accuracy=float(certified.mean()),
        attack_success_rate=float(np.mean([p["on_boundary"] for p in per_input])) if k else 0.0,
        certificate_success_rate=float(np.mean([p["tight"] for p in per_input])) if k else 0.0,
        K_lb=K_lb, K_ub=K_ub,
        mean_crc=float(radii.mean()) if k else math.nan,
        refuted_certificates=refuted,
        per_input=per_input,
    )


def _curvature_gap(net: Mlp, X, Y, min_pair_count: int):
    """K_lb and K_ub over (label, runner-up) pairs with enough images; nan if none qualify."""
    T = label_targets(net, X, Y)
    lbs, ubs = [], []
    keys = np.stack([Y, T], axis=1)
    pairs, counts = np.unique(keys, axis=0, return_counts=True)
    for (y, t), c in zip(pairs, counts):
        if c < min_pair_count:
            continue
        rows = np.flatnonzero((Y == y) & (T == t))
        lbs.append(max(hessian_spectral_norm(net, X[i], int(y), int(t)) for i in rows))
        ubs.append(global_bounds(net, int(y), int(t)).K)
    if not lbs:
        return math.nan, math.nan
    return float(np.mean(lbs)), float(np.mean(ubs))
