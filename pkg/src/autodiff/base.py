from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from autodiff.tensor import Tensor
from errors import ContractError


class Parameter:
    """
    A named, freezable tensor owned by a layer.

    Freezing only switches off gradient tracking; the optimizer skips frozen
    parameters, so their values never change while frozen.
    """

    def __init__(self, name: str, data, frozen: bool = False) -> None:
        self.name = name
        self.tensor = Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=not frozen)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"

    @property
    def frozen(self) -> bool:
        return not self.tensor.requires_grad

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self.tensor.requires_grad = not value

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    def zero_grad(self) -> None:
        self.tensor.zero_grad()


class Module:
    """
    Base class for all differentiable building blocks.

    A module owns parameters and child modules; ``name`` is the dotted prefix
    its parameters are registered under, e.g. ``encoder.layer2``.
    """

    def __init__(self, name: str) -> None:
        self.name = name
        self._parameters: list[Parameter] = []
        self._children: list[Module] = []

    def add_parameter(self, suffix: str, data) -> Parameter:
        parameter = Parameter(f"{self.name}.{suffix}", data)
        self._parameters.append(parameter)
        return parameter

    def add_module(self, module: "Module") -> "Module":
        self._children.append(module)
        return module

    def parameters(self) -> list[Parameter]:
        return list(self._iter_parameters())

    def _iter_parameters(self) -> Iterator[Parameter]:
        yield from self._parameters
        for child in self._children:
            yield from child._iter_parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        named: dict[str, Parameter] = {}
        for parameter in self._iter_parameters():
            if parameter.name in named:
                raise ContractError(f"duplicate parameter name {parameter.name!r}")
            named[parameter.name] = parameter
        return named

    def freeze(self) -> None:
        for parameter in self._iter_parameters():
            parameter.frozen = True

    def unfreeze(self) -> None:
        for parameter in self._iter_parameters():
            parameter.frozen = False

    def zero_grad(self) -> None:
        for parameter in self._iter_parameters():
            parameter.zero_grad()

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)
