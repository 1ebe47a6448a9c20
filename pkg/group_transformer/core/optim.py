"""Stochastic gradient descent without momentum."""

from __future__ import annotations

import logging
from typing import Iterable, Mapping, Tuple, Union

from ..models import SgdConfig
from .errors import GradientError
from .tensor import Tensor

logger = logging.getLogger("group-transformer.optim")

Params = Union[Mapping[str, Tensor], Iterable[Tensor]]


def _named(params: Params) -> list[Tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(p.name or f"param[{i}]", p) for i, p in enumerate(params)]


def sgd_step(params: Params, config: SgdConfig, epoch: int) -> float:
    """Apply p <- p - lr(epoch) * grad(p) and clear the gradients.

    Returns the learning rate that was used.
    """
    named = _named(params)
    for name, param in named:
        if param.grad is None:
            raise GradientError(f"parameter {name!r} has no gradient", details={"parameter": name})
    lr = config.lr_at(epoch)
    for _, param in named:
        param.data = param.data - lr * param.grad
        param.grad = None
    logger.debug("SGD step: %d tensors, lr=%g (epoch %d)", len(named), lr, epoch)
    return lr


def zero_grad(params: Params) -> None:
    for _, param in _named(params):
        param.grad = None
