from __future__ import annotations

import logging
from typing import Callable, Iterable

import numpy as np

from autodiff.base import Parameter
from autodiff.tensor import Tensor
from errors import ContractError

logger = logging.getLogger(__name__)

RELATIVE_FLOOR = 1e-8


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Parameter],
    step: float = 1e-5,
) -> float:
    """
    Compare analytic gradients against central differences.

    ``loss_fn`` rebuilds the forward graph from the current parameter values and
    returns a scalar. Returns the largest relative error
    ``|analytic - central| / max(|analytic|, |central|, 1e-8)`` over every entry
    of every non-frozen parameter; frozen parameters are not checked.
    """
    if step <= 0:
        raise ContractError(f"finite difference step must be positive, got {step}")
    checked = [p for p in params if not p.frozen]

    for parameter in checked:
        parameter.zero_grad()
    loss = loss_fn()
    if loss.requires_grad:
        loss.backward()
    analytic = {
        p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in checked
    }
    for parameter in checked:
        parameter.zero_grad()

    worst = 0.0
    for parameter in checked:
        for index in np.ndindex(parameter.shape):
            original = parameter.data[index]
            parameter.data[index] = original + step
            upper = loss_fn().item()
            parameter.data[index] = original - step
            lower = loss_fn().item()
            parameter.data[index] = original

            central = (upper - lower) / (2.0 * step)
            exact = analytic[parameter.name][index]
            error = abs(exact - central) / max(abs(exact), abs(central), RELATIVE_FLOOR)
            if error > worst:
                worst = error
                logger.debug("gradcheck %s%s: analytic %.6e, central %.6e", parameter.name, index, exact, central)
    return worst
