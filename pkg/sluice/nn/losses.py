import math

import numpy as np

from .tensor import Tensor, _sigmoid, lift


def bce_loss(z: float, y: int) -> tuple[float, float]:
    """stable binary cross-entropy on a logit, returns (loss, dloss/dz)"""
    loss = max(z, 0.0) - z * y + math.log1p(math.exp(-abs(z)))
    return loss, float(_sigmoid(np.array(z))) - y


def binary_cross_entropy(z: Tensor, y: np.ndarray) -> Tensor:
    """mean stable BCE over a vector of logits"""
    y = np.asarray(y, dtype=np.float64).reshape(z.shape)
    zd = z.data
    losses = np.maximum(zd, 0.0) - zd * y + np.log1p(np.exp(-np.abs(zd)))

    def _backward(g):
        z.accumulate(g * (_sigmoid(zd) - y) / zd.size)

    return Tensor(losses.mean(), (z,), _backward, "bce")


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred - lift(np.asarray(target, dtype=np.float64))
    return diff.square().mean()
