"""AdamW, global-norm gradient clipping, and EMA weight tracking."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter


class AdamW:
    """Decoupled-weight-decay Adam with bias correction."""

    def __init__(self, params: list[Parameter], lr: float = 2e-4,
                 beta1: float = 0.9, beta2: float = 0.999,
                 weight_decay: float = 1e-4, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is None:
                continue
            p.step += 1
            g = p.grad
            p.m = self.beta1 * p.m + (1.0 - self.beta1) * g
            p.v = self.beta2 * p.v + (1.0 - self.beta2) * g * g
            mhat = p.m / (1.0 - self.beta1 ** p.step)
            vhat = p.v / (1.0 - self.beta2 ** p.step)
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def adamw_step(params, lr, beta1=0.9, beta2=0.999, weight_decay=1e-4):
    """One-shot functional form of the AdamW update."""
    AdamW(params, lr=lr, beta1=beta1, beta2=beta2, weight_decay=weight_decay).step()


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def ema_update(shadow: dict[str, np.ndarray], live: dict[str, np.ndarray],
               decay: float) -> dict[str, np.ndarray]:
    """shadow <- decay * shadow + (1 - decay) * live, in place."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must lie in [0, 1]")
    for k, v in live.items():
        shadow[k] = decay * shadow[k] + (1.0 - decay) * v
    return shadow
