from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from autodiff.base import Parameter
from errors import ContractError

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """
    Learning rate, step counter and per-parameter momentum buffers.

    ``momentum == 0`` is plain SGD and allocates no buffers.
    """

    learning_rate: float
    momentum: float = 0.0
    step_count: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ContractError(f"learning rate must be non-negative, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(params: Iterable[Parameter], state: OptimizerState) -> None:
    """
    One descent step ``p <- p - lr * grad`` on every non-frozen parameter, then
    clear all gradients. Frozen parameters are not touched.
    """
    params = list(params)
    trainable = [p for p in params if not p.frozen]
    missing = [p.name for p in trainable if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for trainable parameters: {', '.join(missing)}")

    for parameter in trainable:
        update = parameter.grad
        if state.momentum > 0.0:
            buffer = state.buffers.get(parameter.name)
            if buffer is None:
                buffer = np.zeros_like(parameter.data)
                state.buffers[parameter.name] = buffer
            elif buffer.shape != parameter.shape:
                raise ContractError(
                    f"momentum buffer for {parameter.name} has shape {buffer.shape}, "
                    f"parameter has {parameter.shape}"
                )
            buffer *= state.momentum
            buffer += update
            update = buffer
        parameter.data[...] -= state.learning_rate * update

    for parameter in params:
        parameter.zero_grad()
    state.step_count += 1
