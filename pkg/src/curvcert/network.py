"""Fully connected networks with a smooth activation after every hidden layer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .activation import ActivationKind, act_eval


@dataclass(frozen=True)
class DenseLayer:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64)
        b = np.array(self.b, dtype=np.float64).reshape(-1)
        if W.ndim != 2:
            raise ValueError(f"weight matrix must be 2-D, got shape {W.shape}")
        if W.shape[0] != b.shape[0]:
            raise ValueError(f"weight rows ({W.shape[0]}) != bias length ({b.shape[0]})")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("layer parameters must be finite")
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape


@dataclass(frozen=True)
class Mlp:
    """L-layer perceptron; the activation follows layers 1..L-1 only."""

    layers: tuple[DenseLayer, ...]
    activation: ActivationKind
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        layers = tuple(
            l if isinstance(l, DenseLayer) else DenseLayer(*l) for l in self.layers
        )
        if len(layers) < 2:
            raise ValueError("an Mlp needs at least 2 layers")
        for I in range(1, len(layers)):
            if layers[I].W.shape[1] != layers[I - 1].W.shape[0]:
                raise ValueError(
                    f"layer {I + 1} expects {layers[I].W.shape[1]} inputs but "
                    f"layer {I} produces {layers[I - 1].W.shape[0]}"
                )
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "activation", ActivationKind.parse(self.activation))

    @classmethod
    def from_arrays(cls, weights: Sequence, biases: Sequence, activation, **metadata) -> "Mlp":
        return cls(tuple(DenseLayer(W, b) for W, b in zip(weights, biases)), activation, dict(metadata))

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def class_count(self) -> int:
        return self.layers[-1].W.shape[0]

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [l.W.shape[0] for l in self.layers]

    @property
    def weights(self) -> list[np.ndarray]:
        return [l.W for l in self.layers]

    @property
    def biases(self) -> list[np.ndarray]:
        return [l.b for l in self.layers]

    def replace(self, weights=None, biases=None, **metadata) -> "Mlp":
        weights = self.weights if weights is None else weights
        biases = self.biases if biases is None else biases
        meta = {**self.metadata, **metadata}
        return Mlp.from_arrays(weights, biases, self.activation, **meta)

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Logits for a single input or a batch of row vectors."""
        a = np.asarray(x, dtype=np.float64)
        for I, layer in enumerate(self.layers):
            z = a @ layer.W.T + layer.b
            a = z if I == self.depth - 1 else act_eval(self.activation, z, 0)
        return a


def glorot_uniform(widths: Sequence[int], activation, rng: np.random.Generator, **metadata) -> Mlp:
    """Uniform(+-sqrt(6/(fan_in + fan_out))) weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    metadata.setdefault("init", "glorot_uniform")
    return Mlp.from_arrays(weights, biases, activation, **metadata)


@dataclass(frozen=True)
class ForwardTrace:
    """Pre-activations ``z[0..L-1]`` (layers 1..L) and post-activations
    ``a[0..L-1]`` (a[0] is the input, a[I] = s(z[I-1]))."""

    z: list
    a: list

    @property
    def logits(self) -> np.ndarray:
        return self.z[-1]


def forward(net: Mlp, x) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise ValueError(f"input has shape {x.shape}, expected ({net.input_dim},)")
    zs, acts = [], [x]
    a = x
    for I, layer in enumerate(net.layers):
        z = layer.W @ a + layer.b
        zs.append(z)
        if I < net.depth - 1:
            a = act_eval(net.activation, z, 0)
            acts.append(a)
    return ForwardTrace(z=zs, a=acts)


def _check_pair(net: Mlp, y: int, t: int):
    C = net.class_count
    if not (0 <= y < C and 0 <= t < C):
        raise ValueError(f"class indices ({y}, {t}) out of range for {C} classes")
    if y == t:
        raise ValueError("margin is degenerate for y == t")


def margin(net: Mlp, x, y: int, t: int) -> float:
    """``z_y - z_t`` of the final layer at ``x``."""
    _check_pair(net, y, t)
    z = forward(net, x).logits
    return float(z[y] - z[t])


def runner_up_target(net: Mlp, x) -> int:
    """Class with the second largest logit (lowest index wins ties)."""
    z = net.logits(np.asarray(x, dtype=np.float64))
    return runner_up_from_logits(z)


def runner_up_from_logits(z) -> int:
    z = np.asarray(z)
    if z.shape[-1] < 2:
        raise ValueError("need at least two classes")
    # stable sort on -z keeps the lowest index first among equal logits
    order = np.argsort(-z, kind="stable")
    return int(order[1])
