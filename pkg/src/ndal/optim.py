"""Optimizers over named parameter collections.

Parameters are an ordered ``dict[str, Tensor]``; gradients are read from each
tensor's ``.grad`` slot and cleared after the step. Weight decay is decoupled
(applied directly to the weights, not folded into the gradient).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import MissingGrad, StaleState


class Adam:
    """Adam with bias correction and decoupled weight decay."""

    kind = "adam"

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 2e-5):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGrad(f"parameter {name!r} has no gradient")
            m, v = self._m[name], self._v[name]
            if m.shape != p.data.shape:
                raise StaleState(f"moment shape {m.shape} vs param {p.data.shape} for {name!r}")
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self._m[name]
            out[f"adam.v.{name}"] = self._v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            for store, key in ((self._m, f"adam.m.{name}"), (self._v, f"adam.v.{name}")):
                arr = arrays.get(key)
                if arr is None or arr.shape != p.data.shape:
                    raise StaleState(f"missing or mis-shaped optimizer state {key!r}")
                store[name] = arr.astype(p.data.dtype, copy=True)


class Sgd:
    """Plain gradient descent with the same decoupled weight decay."""

    kind = "sgd"

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 weight_decay: float = 2e-5):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.step_count = 0

    def step(self) -> None:
        self.step_count += 1
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGrad(f"parameter {name!r} has no gradient")
            if p.grad.shape != p.data.shape:
                raise StaleState(f"grad shape {p.grad.shape} vs param {p.data.shape} for {name!r}")
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        pass


def make_optimizer(kind: str, params: dict[str, Tensor], lr: float,
                   weight_decay: float):
    if kind == "adam":
        return Adam(params, lr=lr, weight_decay=weight_decay)
    if kind == "sgd":
        return Sgd(params, lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer kind {kind!r}")
