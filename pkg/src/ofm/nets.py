"""Unconstrained vector-valued MLP with manual backprop."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .potential import ACTIVATIONS


class MLP:
    """R^n_in -> R^n_out feed-forward net; parameters live in one flat vector."""

    def __init__(self, n_in: int, n_out: int, hidden: Sequence[int] = (128, 128, 64),
                 activation: str = "relu", theta=None):
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        self._act = ACTIVATIONS[activation]
        sizes = (self.n_in, *self.hidden, self.n_out)
        self._shapes = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            self._shapes += [(b, a), (b,)]
        n = sum(int(np.prod(s)) for s in self._shapes)
        self.theta = np.zeros(n) if theta is None else np.array(theta, dtype=np.float64)
        if self.theta.shape != (n,):
            raise ValueError(f"theta has {self.theta.size} entries, layout needs {n}")
        self._bind()

    def _bind(self):
        self.layers = []
        off = 0
        for i in range(0, len(self._shapes), 2):
            ws, bs = self._shapes[i], self._shapes[i + 1]
            nw, nb = int(np.prod(ws)), int(np.prod(bs))
            W = self.theta[off:off + nw].reshape(ws)
            b = self.theta[off + nw:off + nw + nb]
            self.layers.append((W, b))
            off += nw + nb

    @property
    def n_params(self) -> int:
        return self.theta.size

    def init_params(self, rng: np.random.Generator, out_scale: float = 1.0) -> "MLP":
        # torch.nn.Linear default: U(-1/sqrt(fan_in), 1/sqrt(fan_in))
        for i, (W, b) in enumerate(self.layers):
            bound = 1.0 / np.sqrt(W.shape[1])
            if i == len(self.layers) - 1:
                bound *= out_scale
            W[...] = rng.uniform(-bound, bound, W.shape)
            b[...] = rng.uniform(-bound, bound, b.shape)
        return self

    def config(self) -> dict:
        return dict(n_in=self.n_in, n_out=self.n_out, hidden=list(self.hidden),
                    activation=self.activation)

    def copy(self) -> "MLP":
        return MLP(**self.config(), theta=self.theta)

    def forward(self, x, cache: bool = False):
        a = np.asarray(x, dtype=np.float64)
        acts, derivs = [a], []
        for i, (W, b) in enumerate(self.layers):
            h = a @ W.T + b
            if i < len(self.layers) - 1:
                a, s1, _ = self._act(h)
                derivs.append(s1)
            else:
                a = h
            acts.append(a)
        return (a, (acts, derivs)) if cache else a

    __call__ = forward

    def backward(self, cache, grad_out) -> np.ndarray:
        """Parameter gradient of sum(grad_out * output)."""
        acts, derivs = cache
        grads = []
        delta = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[i]
            grads.append(delta.sum(axis=0))
            grads.append(delta.T @ acts[i])
            if i > 0:
                delta = (delta @ W) * derivs[i - 1]
        return np.concatenate([g.ravel() for g in reversed(grads)])

    def to_dict(self) -> dict:
        return {"kind": "mlp", "format_version": 1, **self.config(), "theta": self.theta.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "MLP":
        return cls(data["n_in"], data["n_out"], data["hidden"], data["activation"],
                   theta=np.array(data["theta"]))
