"""First-order optimizers and EMA over flat parameter vectors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        """In-place update of ``theta``."""
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        theta -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class RMSprop:
    # torch defaults
    lr: float = 1e-3
    alpha: float = 0.99
    eps: float = 1e-8
    sq: np.ndarray | None = field(default=None, repr=False)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        if self.sq is None:
            self.sq = np.zeros_like(theta)
        self.sq = self.alpha * self.sq + (1 - self.alpha) * grad * grad
        theta -= self.lr * grad / (np.sqrt(self.sq) + self.eps)


def make_optimizer(name: str, lr: float):
    name = name.lower()
    if name == "adam":
        return Adam(lr=lr)
    if name == "rmsprop":
        return RMSprop(lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")


class EmaShadow:
    """theta_ema <- decay * theta_ema + (1 - decay) * theta."""

    def __init__(self, theta: np.ndarray, decay: float = 0.999):
        if not 0.0 <= decay < 1.0:
            raise ValueError("EMA decay must lie in [0, 1)")
        self.decay = decay
        self.theta = np.array(theta, dtype=np.float64, copy=True)

    def update(self, theta: np.ndarray) -> None:
        self.theta *= self.decay
        self.theta += (1.0 - self.decay) * theta
