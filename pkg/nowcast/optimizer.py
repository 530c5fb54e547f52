"""
AdamW with decoupled weight decay.

    theta <- theta * (1 - lr * wd)
    m <- b1 * m + (1 - b1) * g
    v <- b2 * v + (1 - b2) * g^2
    theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
"""

import logging

import numpy as np

from .errors import ShapeError
from .model import ModelState, Params

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def adamw_step(
    state: ModelState,
    grads: Params,
    lr: float,
    weight_decay: float = 0.02,
    beta1: float = BETA1,
    beta2: float = BETA2,
    eps: float = EPS,
) -> ModelState:
    """One in-place AdamW update of ``state``; returns ``state``."""
    if set(grads) != set(state.params):
        missing = sorted(set(state.params) ^ set(grads))
        raise ShapeError(f"gradients are not keyed like the parameters: {missing}")

    state.step += 1
    t = state.step
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    decay = 1.0 - lr * weight_decay

    for key, param in state.params.items():
        grad = grads[key]
        if grad.shape != param.shape:
            raise ShapeError(f"gradient for {key} has shape {grad.shape}, parameter has {param.shape}")
        m = state.moment1[key]
        v = state.moment2[key]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        param *= param.dtype.type(decay)
        param -= (lr * (m / correction1) / (np.sqrt(v / correction2) + eps)).astype(param.dtype)
    return state
