"""First-order adaptive optimizer with decoupled weight decay and a
linear warmup / linear decay schedule."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class AdamW:
    def __init__(self, params: Mapping[str, Tensor], lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ContractError("learning rate must be nonnegative")
        self.params = dict(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr_scale: float = 1.0) -> None:
        """One update; lr_scale is the scheduler multiplier for this step."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        lr = self.lr * lr_scale
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def linear_schedule(step: int, total_steps: int, warmup_ratio: float = 0.06) -> float:
    """Linear warmup to 1.0 then linear decay to 0.0; step is 0-based."""
    if total_steps <= 0:
        raise ContractError("total_steps must be positive")
    warmup = max(1, int(round(warmup_ratio * total_steps)))
    if step < warmup:
        return (step + 1) / warmup
    remaining = total_steps - warmup
    if remaining <= 0:
        return 1.0
    return max(0.0, (total_steps - step - 1) / remaining)
