"""Adam-style optimizer with parameter groups and global gradient clipping."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def clip_global_norm(tensors: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    norm = total ** 0.5
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for t in tensors:
            if t.grad is not None:
                t.grad = t.grad * np.asarray(scale, dtype=t.grad.dtype)
    return norm


class Adam:
    """Adaptive moment estimation over one or more (tensors, lr) groups.

    step(lr_scale) applies lr_group * lr_scale, so a linear-decay schedule
    is just a shrinking scale factor.
    """

    def __init__(self, groups: list[tuple[list[Tensor], float]],
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.groups = [(list(tensors), float(lr)) for tensors, lr in groups]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = {}
        self._v = {}
        for tensors, _ in self.groups:
            for p in tensors:
                self._m[id(p)] = np.zeros_like(p.data)
                self._v[id(p)] = np.zeros_like(p.data)

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for tensors, lr in self.groups:
            lr_t = lr * lr_scale
            for p in tensors:
                if p.grad is None:
                    continue
                g = p.grad
                m = self._m[id(p)] = b1 * self._m[id(p)] + (1 - b1) * g
                v = self._v[id(p)] = b2 * self._v[id(p)] + (1 - b2) * (g * g)
                update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
                p.data = p.data - np.asarray(lr_t, dtype=p.data.dtype) * update.astype(p.data.dtype)

    def zero_grad(self) -> None:
        for tensors, _ in self.groups:
            for p in tensors:
                p.zero_grad()
