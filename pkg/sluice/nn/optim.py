from dataclasses import dataclass

import numpy as np

from ..exceptions import NonFiniteError
from .layers import ParamStore


@dataclass
class AdamSettings:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps=1e-8
) -> ParamStore:
    for name, param in store:
        if param.grad is not None and not np.isfinite(param.grad).all():
            bad = int((~np.isfinite(param.grad)).sum())
            raise NonFiniteError(
                f"non-finite gradient for parameter {name} ({bad} entries)"
            )
    store.step += 1
    t = store.step
    for name, param in store:
        grad = param.grad
        if grad is None:
            continue
        m, v = store.moments.get(name, (np.zeros_like(grad), np.zeros_like(grad)))
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad**2
        store.moments[name] = (m, v)
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    store.zero_grad()
    return store


def step_with(store: ParamStore, settings: AdamSettings) -> ParamStore:
    return adam_step(store, settings.lr, settings.beta1, settings.beta2, settings.eps)
