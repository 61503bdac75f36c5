"""``curvcert`` command line: train, certify, attack, eval, bounds, check.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical fault.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import logging
import math
import os
import re
import sys
import time

import numpy as np

from . import __version__
from .curvature import global_bounds, local_two_layer_bounds
from .data_io import (
    CERT_FIELDS,
    DataError,
    load_idx,
    load_model,
    save_model,
    write_report,
)
from .diff import fd_gradient, fd_hessian_fn, grad_margin, hessian_margin, hessian_spectral_norm
from .network import glorot_uniform, margin
from .solver import attack, certify, certify_local
from .training import TrainConfig, _map, evaluate, train

log = logging.getLogger("curvcert")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_arch(text: str) -> tuple[int, int]:
    """``"LxW"`` -> (L, W): L layers, hidden width W."""
    m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", text)
    if not m:
        raise UsageError(f"architecture must look like '2x64', got {text!r}")
    L, W = int(m.group(1)), int(m.group(2))
    if L < 2 or W < 1:
        raise UsageError(f"architecture needs at least 2 layers and width >= 1, got {text!r}")
    return L, W


def _header(args, command: str) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    return {
        "command": command,
        "version": __version__,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        **cfg,
    }


def _load_data(args):
    return load_idx(args.images, args.labels)


def _select(net, data, count, seed):
    """``count`` randomly chosen correctly classified inputs, in index order."""
    pred = np.argmax(net.logits(data.images), axis=1) if len(data) else np.zeros(0, dtype=int)
    correct = np.flatnonzero(pred == data.labels)
    rng = np.random.default_rng(seed)
    if count < len(correct):
        correct = np.sort(rng.choice(correct, size=count, replace=False))
    return correct, rng


def _targets(net, data, idx, policy, rng):
    out = []
    for i in idx:
        z = net.logits(data.images[i])
        y = int(data.labels[i])
        if policy == "runner-up":
            order = np.argsort(-z, kind="stable")
            t = int(order[1]) if int(order[0]) == y else int(order[0])
        elif policy == "least":
            zz = z.copy()
            zz[y] = np.inf
            t = int(np.argmin(zz))
        else:
            others = [c for c in range(net.class_count) if c != y]
            t = int(rng.choice(others))
        out.append(t)
    return out


def _cert_job(job):
    net, i, x, y, t, local, record_time = job
    t0 = time.perf_counter()
    r = certify(net, x, y, t)
    if local:
        r = certify_local(net, x, y, t, global_result=r)
    wall = time.perf_counter() - t0 if record_time else None
    return {"input_id": i, "y": y, "t": t, "radius": r.radius, "eta": r.eta,
            "margin_at_x": r.margin_at_x, "flag": r.tight, "wall_time": wall}


def _attack_job(job):
    net, i, x, y, t, rho, record_time = job
    t0 = time.perf_counter()
    r = attack(net, x, y, t, rho)
    wall = time.perf_counter() - t0 if record_time else None
    return {"input_id": i, "y": y, "t": t, "radius": float(np.linalg.norm(r.x_attack - x)),
            "eta": r.eta, "margin_at_x": r.margin_at_x, "flag": r.on_boundary, "wall_time": wall}


def _workers(args) -> int:
    return args.workers if args.workers and args.workers > 0 else (os.cpu_count() or 1)


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    L, W = parse_arch(args.arch)
    data = load_idx(args.images, args.labels)
    cfg = TrainConfig(gamma=args.gamma, rho=args.rho, epochs=args.epochs, batch_size=args.batch_size,
                      learning_rate=args.lr, mode=args.mode, seed=args.seed, optimizer=args.optimizer,
                      attack_every=args.attack_every)
    widths = [data.dim] + [W] * (L - 1) + [data.class_count]
    net = glorot_uniform(widths, args.activation, np.random.default_rng(args.seed))
    if args.log and os.path.exists(args.log):
        os.remove(args.log)
    net, metrics = train(net, data, cfg, log_path=args.log, record_time=args.record_time)
    save_model(net, args.out)
    last = metrics[-1] if metrics else {}
    print(f"trained {args.arch} {args.activation}: accuracy {last.get('accuracy', math.nan):.4f}, "
          f"mean K {last.get('mean_K', math.nan):.4g} -> {args.out}")
    return EXIT_OK


def cmd_certify(args) -> int:
    net = load_model(args.model)
    if args.local and net.depth != 2:
        raise UsageError("--local is only available for 2-layer models")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    data = _load_data(args)
    idx, rng = _select(net, data, args.count, args.seed)
    ts = _targets(net, data, idx, args.target, rng)
    jobs = [(net, int(i), data.images[i], int(data.labels[i]), t, args.local, args.record_time)
            for i, t in zip(idx, ts)]
    rows = _map(_cert_job, jobs, _workers(args))
    write_report(rows, args.out, args.format, fields=CERT_FIELDS, header=_header(args, "certify"))
    mean = float(np.mean([r["radius"] for r in rows])) if rows else math.nan
    rate = float(np.mean([r["flag"] for r in rows])) if rows else 0.0
    print(f"certified {len(rows)} inputs: mean CRC {mean:.6g}, certificate success rate {rate:.6g}")
    return EXIT_OK


def cmd_attack(args) -> int:
    net = load_model(args.model)
    if not args.rho > 0:
        raise UsageError("--rho must be positive")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    data = _load_data(args)
    idx, rng = _select(net, data, args.count, args.seed)
    ts = _targets(net, data, idx, args.target, rng)
    jobs = [(net, int(i), data.images[i], int(data.labels[i]), t, args.rho, args.record_time)
            for i, t in zip(idx, ts)]
    rows = _map(_attack_job, jobs, _workers(args))
    write_report(rows, args.out, args.format, fields=CERT_FIELDS, header=_header(args, "attack"))
    rate = float(np.mean([r["flag"] for r in rows])) if rows else 0.0
    broken = sum(r["margin_at_x"] <= 0 for r in rows)
    print(f"attacked {len(rows)} inputs at rho={args.rho}: attack success rate {rate:.6g}, "
          f"{broken} misclassified")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = load_model(args.model)
    if args.local and net.depth != 2:
        raise UsageError("--local is only available for 2-layer models")
    data = _load_data(args)
    if args.count is not None and args.count < len(data):
        pick = np.sort(np.random.default_rng(args.seed).choice(len(data), args.count, replace=False))
        data = data.subset(pick)
    rep = evaluate(net, data, args.rho, local=args.local, pgd_steps=args.pgd_steps,
                   min_pair_count=args.min_pair_count, seed=args.seed, workers=_workers(args))
    fields = [f.name for f in dataclasses.fields(rep) if f.name != "per_input"]
    write_report({k: getattr(rep, k) for k in fields}, args.out, args.format, header=_header(args, "eval"))
    for k in fields:
        print(f"{k}: {getattr(rep, k)}")
    return EXIT_OK


def cmd_bounds(args) -> int:
    net = load_model(args.model)
    if (args.y is None) != (args.t is None):
        raise UsageError("give both --y and --t, or neither")
    C = net.class_count
    pairs = [(args.y, args.t)] if args.y is not None else [(y, t) for y in range(C) for t in range(C) if y != t]
    rows = []
    for y, t in pairs:
        if not (0 <= y < C and 0 <= t < C) or y == t:
            raise UsageError(f"invalid class pair ({y}, {t}) for {C} classes")
        b = global_bounds(net, y, t)
        rows.append({"y": y, "t": t, "m": b.m, "M": b.M, "K": b.K})
    if args.out:
        write_report(rows, args.out, args.format, fields=("y", "t", "m", "M", "K"),
                     header=_header(args, "bounds"))
    for r in rows:
        print(f"y={r['y']} t={r['t']} m={r['m']:.6g} M={r['M']:.6g} K={r['K']:.6g}")
    return EXIT_OK


def _random_nets(rng, count):
    kinds = ("sigmoid", "tanh", "softplus")
    for k in range(count):
        depth = 2 + k % 3
        widths = [int(rng.integers(2, 7))] + [int(rng.integers(2, 9)) for _ in range(depth - 1)] + [3]
        net = glorot_uniform(widths, kinds[k % 3], rng)
        yield net.replace(weights=[2.0 * W for W in net.weights],
                          biases=[rng.standard_normal(b.shape) for b in net.biases])


def run_checks(nets, rng, points: int = 200, full_hessian_max_dim: int = 12) -> list[str]:
    """Finite-difference and eigenvalue-containment oracles; returns violation messages."""
    problems = []
    for n_id, net in enumerate(nets):
        D = net.input_dim
        y, t = 0, 1
        b = global_bounds(net, y, t)
        if not (-b.K - 1e-12 <= b.m <= 0.0 <= b.M <= b.K + 1e-12):
            problems.append(f"net {n_id}: bound ordering broken (m={b.m}, M={b.M}, K={b.K})")
        for _ in range(3):
            x = rng.standard_normal(D)
            f = lambda v: margin(net, v, y, t)  # noqa: E731
            g = grad_margin(net, x, y, t)
            gd = fd_gradient(f, x)
            if np.max(np.abs(g - gd)) > 1e-5 * max(1.0, np.max(np.abs(gd))):
                problems.append(f"net {n_id}: gradient differs from finite differences")
            if D <= full_hessian_max_dim:
                err = np.max(np.abs(hessian_margin(net, x, y, t) - fd_hessian_fn(f, x)))
            else:
                # directional second difference along a random unit vector
                d = rng.standard_normal(D)
                d /= np.linalg.norm(d)
                s = 1e-4
                fdd = (f(x + s * d) - 2 * f(x) + f(x - s * d)) / s**2
                err = abs(d @ hessian_margin(net, x, y, t) @ d - fdd)
            if err > 1e-4:
                problems.append(f"net {n_id}: Hessian differs from finite differences by {err:.3g}")
        for _ in range(points):
            x = 3.0 * rng.standard_normal(D)
            if D <= 64:
                ev = np.linalg.eigvalsh(hessian_margin(net, x, y, t))
                lo, hi = ev[0], ev[-1]
                mag = max(abs(lo), abs(hi))
            else:
                lo, hi = b.m, b.M
                mag = hessian_spectral_norm(net, x, y, t)
            if mag > b.K + 1e-9 or lo < b.m - 1e-9 or hi > b.M + 1e-9:
                problems.append(f"net {n_id}: Hessian eigenvalues escape the curvature bounds")
                break
        if net.depth == 2:
            x0 = rng.standard_normal(D)
            lb = local_two_layer_bounds(net, y, t, x0, 0.5)
            for _ in range(min(points, 50)):
                d = rng.standard_normal(D)
                x = x0 + 0.5 * rng.uniform() ** (1.0 / D) * d / np.linalg.norm(d)
                ev = np.linalg.eigvalsh(hessian_margin(net, x, y, t)) if D <= 64 else None
                if ev is not None and (ev[0] < lb.m - 1e-9 or ev[-1] > lb.M + 1e-9):
                    problems.append(f"net {n_id}: local bounds violated inside the ball")
                    break
    return problems


def cmd_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.model:
        nets = [load_model(p) for p in args.model]
    else:
        nets = list(_random_nets(rng, args.nets))
    problems = run_checks(nets, rng, points=args.points)
    for p in problems:
        print(f"VIOLATION {p}")
    print(f"checked {len(nets)} nets: {len(problems)} violations")
    return EXIT_NUMERIC if problems else EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="curvcert", description="Curvature-based l2 robustness certificates for smooth MLPs.")
    p.add_argument("--version", action="version", version=f"curvcert {__version__}")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True, model=True):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--workers", type=int, default=0, help="worker processes (0: all cores)")
        sp.add_argument("--format", choices=("csv", "jsonl"), default="csv")
        sp.add_argument("--record-time", action="store_true",
                        help="fill wall-time fields (makes rows non-reproducible)")
        if model:
            sp.add_argument("--model", required=True)
        if data:
            sp.add_argument("--images", required=True)
            sp.add_argument("--labels", required=True)

    sp = sub.add_parser("train", help="train a network")
    common(sp, model=False)
    sp.add_argument("--arch", default="2x64")
    sp.add_argument("--activation", choices=("sigmoid", "tanh", "softplus"), default="sigmoid")
    sp.add_argument("--gamma", type=float, default=0.0)
    sp.add_argument("--rho", type=float, default=0.0)
    sp.add_argument("--mode", choices=("standard", "curvature_only", "crt"), default="standard")
    sp.add_argument("--epochs", type=int, default=5)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    sp.add_argument("--attack-every", type=int, default=1)
    sp.add_argument("--log", help="per-epoch metrics (json-lines)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    for name, fn, helptext in (("certify", cmd_certify, "certificates for correctly classified inputs"),
                               ("attack", cmd_attack, "dual attack at a fixed radius")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--count", type=int, default=150)
        sp.add_argument("--target", choices=("runner-up", "random", "least"), default="runner-up")
        if name == "certify":
            sp.add_argument("--local", action="store_true")
        else:
            sp.add_argument("--rho", type=float, default=0.5)
        sp.add_argument("--out", required=True)
        sp.set_defaults(func=fn)

    sp = sub.add_parser("eval", help="accuracy, robust accuracy and curvature statistics")
    common(sp)
    sp.add_argument("--rho", type=float, default=0.5)
    sp.add_argument("--count", type=int)
    sp.add_argument("--local", action="store_true")
    sp.add_argument("--pgd-steps", type=int, default=40)
    sp.add_argument("--min-pair-count", type=int, default=100)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bounds", help="curvature bounds (m, M, K) per class pair")
    common(sp, data=False)
    sp.add_argument("--y", type=int)
    sp.add_argument("--t", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bounds)

    sp = sub.add_parser("check", help="run the finite-difference and containment oracles")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--model", nargs="*", default=[])
    sp.add_argument("--nets", type=int, default=12)
    sp.add_argument("--points", type=int, default=200)
    sp.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"curvcert {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"curvcert {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"curvcert {args.command}: numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # configuration values rejected by the library
        print(f"curvcert {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
