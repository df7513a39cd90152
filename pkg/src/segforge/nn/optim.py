"""AdamW with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from ..errors import ValidationError


class AdamW:
    """Updates parameters in place: th -= lr * mhat/(sqrt(vhat)+eps) + lr * wd * th."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float = 5e-5,
        weight_decay: float = 0.01,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ValidationError("lr must be > 0")
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, theta in self.params.items():
            g = grads[name]
            if g.shape != theta.shape:
                raise ValidationError(f"gradient shape mismatch for {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            theta -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)) + (
                self.lr * self.weight_decay
            ) * theta
