"""rmsprop with a step-halving learning-rate schedule, and global-norm clipping."""

from __future__ import annotations

import math

import numpy as np

BASE_LR = 1e-3


def learning_rate(epoch: int, base: float = BASE_LR, halve_every: int = 50) -> float:
    """``base * (1/2) ** floor(epoch / halve_every)``."""
    return base * 0.5 ** (epoch // halve_every)


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradient(grads: dict, max_norm: float = 200.0) -> dict:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


class RMSprop:
    def __init__(self, rho: float = 0.9, eps: float = 1e-8, base_lr: float = BASE_LR):
        self.rho = rho
        self.eps = eps
        self.base_lr = base_lr
        self.epoch = 0
        self.r: dict[str, np.ndarray] = {}

    @property
    def lr(self) -> float:
        return learning_rate(self.epoch, self.base_lr)

    def step(self, params, grads: dict) -> None:
        """Update ``params`` in place. Parameters without a gradient are skipped."""
        lr = self.lr
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            r = self.r.get(name)
            if r is None:
                r = np.zeros_like(p)
            r = self.rho * r + (1.0 - self.rho) * g * g
            self.r[name] = r
            p -= lr * g / (np.sqrt(r) + self.eps)
        params.bump()

    def state_dict(self) -> dict:
        return {
            "rho": self.rho, "eps": self.eps, "base_lr": self.base_lr, "epoch": self.epoch,
            "r": {k: v.copy() for k, v in self.r.items()},
        }

    @classmethod
    def from_state(cls, state: dict) -> RMSprop:
        opt = cls(rho=state["rho"], eps=state["eps"], base_lr=state["base_lr"])
        opt.epoch = state["epoch"]
        opt.r = {k: np.array(v, dtype=np.float64) for k, v in state["r"].items()}
        return opt
