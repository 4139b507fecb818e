"""Graph-convolution backbone: propagate, transform, activate, repeat."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor, matmul

ACTIVATIONS = ("relu", "identity")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class GcnLayer:
    """One convolution: act(a_hat @ h @ w). No bias, matching the update rule."""

    def __init__(self, weight: Tensor, activation: str):
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}; choose from {ACTIVATIONS}")
        self.weight = weight
        self.activation = activation

    @classmethod
    def init(cls, d_in: int, d_out: int, activation: str, rng: np.random.Generator) -> "GcnLayer":
        w = Tensor(glorot_uniform(rng, d_in, d_out), requires_grad=True)
        return cls(w, activation)


def layer_forward(layer: GcnLayer, a_hat: Tensor, h: Tensor) -> Tensor:
    if a_hat.rows != a_hat.cols:
        raise ContractError(f"a_hat must be square, got {a_hat.shape}")
    if h.rows != a_hat.rows:
        raise ContractError(f"node states {h.shape} do not match a_hat {a_hat.shape}")
    # (a_hat @ h) @ w: cheaper than propagating after the width change
    out = matmul(matmul(a_hat, h), layer.weight)
    return out.relu() if layer.activation == "relu" else out


class Backbone:
    """A stack of GcnLayers: relu between layers, identity at the top.

    ``frozen`` marks the weights as non-trainable; the trainer enforces it and
    the tape then skips their gradients entirely.
    """

    def __init__(self, layers: list[GcnLayer], d_in: int, d_hidden: int):
        if not layers:
            raise ContractError("backbone needs at least one layer")
        self.layers = layers
        self.d_in = d_in
        self.d_hidden = d_hidden
        self.frozen = False

    @classmethod
    def build(cls, d_in: int, d_hidden: int, depth: int, seed: int) -> "Backbone":
        if depth < 1:
            raise ConfigError(f"depth must be >= 1, got {depth}")
        if d_in < 1 or d_hidden < 1:
            raise ConfigError("layer widths must be >= 1")
        rng = np.random.default_rng([seed, 11])
        layers = []
        width = d_in
        for l in range(depth):
            act = "identity" if l == depth - 1 else "relu"
            layers.append(GcnLayer.init(width, d_hidden, act, rng))
            width = d_hidden
        return cls(layers, d_in, d_hidden)

    @property
    def depth(self) -> int:
        return len(self.layers)

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen
        for layer in self.layers:
            layer.weight.requires_grad = not frozen

    def forward(self, a_hat: Tensor, x: Tensor) -> Tensor:
        """Plain stack with no adapter taps (pretext training, baselines)."""
        h = x
        for layer in self.layers:
            h = layer_forward(layer, a_hat, h)
        return h

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"backbone.{l}.w", layer.weight) for l, layer in enumerate(self.layers)]

    def param_count(self) -> int:
        return sum(w.data.size for _, w in self.parameters())
