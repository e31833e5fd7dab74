from __future__ import annotations

from typing import Sequence

import numpy as np

from autodiff.base import Module
from autodiff.tensor import ACTIVATIONS, Tensor, activation_forward, linear_forward, take_rows
from errors import ConfigError

EMBEDDING_INIT_RANGE = 0.05


class Linear(Module):
    """
    Affine map ``x @ weight + bias``; weights drawn uniformly in
    +-1/sqrt(fan_in), bias starts at zero.
    """

    def __init__(
        self,
        name: str,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        bias: bool = True,
    ) -> None:
        super().__init__(name)
        if in_features <= 0 or out_features <= 0:
            raise ConfigError(f"{name}: layer sizes must be positive, got {in_features}x{out_features}")
        bound = 1.0 / np.sqrt(in_features)
        self.weight = self.add_parameter("weight", rng.uniform(-bound, bound, size=(in_features, out_features)))
        self.bias = self.add_parameter("bias", np.zeros(out_features)) if bias else None
        self.in_features = in_features
        self.out_features = out_features

    def forward(self, x: Tensor) -> Tensor:
        return linear_forward(x, self.weight.tensor, None if self.bias is None else self.bias.tensor)


class Activation(Module):
    def __init__(self, name: str, kind: str) -> None:
        super().__init__(name)
        if kind not in ACTIVATIONS:
            raise ConfigError(f"{name}: unknown activation {kind!r}, expected one of {ACTIVATIONS}")
        self.kind = kind

    def forward(self, x: Tensor) -> Tensor:
        return activation_forward(x, self.kind)


class Dense(Module):
    """
    A nonlinear layer: a linear map followed by an activation.
    """

    def __init__(
        self,
        name: str,
        in_features: int,
        out_features: int,
        activation: str,
        rng: np.random.Generator,
    ) -> None:
        super().__init__(name)
        self.linear = self.add_module(Linear(name, in_features, out_features, rng))
        self.activation = self.add_module(Activation(name, activation))
        self.out_features = out_features

    def forward(self, x: Tensor) -> Tensor:
        return self.activation(self.linear(x))


class MLP(Module):
    """
    Two-layer perceptron (linear, activation, linear) used for the projector
    and predictor heads. The output map carries no bias, so a constant output
    can only come from the hidden layer.
    """

    def __init__(
        self,
        name: str,
        in_features: int,
        hidden_features: int,
        out_features: int,
        activation: str,
        rng: np.random.Generator,
    ) -> None:
        super().__init__(name)
        self.hidden = self.add_module(Dense(f"{name}.hidden", in_features, hidden_features, activation, rng))
        self.output = self.add_module(Linear(f"{name}.output", hidden_features, out_features, rng, bias=False))
        self.out_features = out_features

    def forward(self, x: Tensor) -> Tensor:
        return self.output(self.hidden(x))


class Embedding(Module):
    def __init__(self, name: str, num_embeddings: int, dim: int, rng: np.random.Generator) -> None:
        super().__init__(name)
        self.table = self.add_parameter(
            "weight",
            rng.uniform(-EMBEDDING_INIT_RANGE, EMBEDDING_INIT_RANGE, size=(num_embeddings, dim)),
        )
        self.dim = dim

    def lookup(self, ids: Sequence[int]) -> Tensor:
        return take_rows(self.table.tensor, ids)
