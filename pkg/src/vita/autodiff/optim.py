"""Trainable parameters and the two optimizers the pipeline uses."""
from __future__ import annotations

from contextlib import contextmanager
from typing import Iterable, Iterator

import numpy as np

from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that always tracks gradients and carries optimizer state."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.velocity = np.zeros_like(self.data)
        self.step = 0

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def reset_state(self) -> None:
        self.m[...] = 0
        self.v[...] = 0
        self.velocity[...] = 0
        self.step = 0


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


@contextmanager
def frozen(params: Iterable[Parameter]) -> Iterator[None]:
    """Stop gradient flow into ``params`` for the duration of the block.

    Used when only input gradients are wanted (attacks, generator steps that
    must not touch the discriminator).
    """
    params = list(params)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


def _check(p: Parameter) -> None:
    if p.grad is None or p.grad.shape != p.data.shape:
        raise ValueError(f"gradient shape {None if p.grad is None else p.grad.shape} "
                         f"does not match parameter shape {p.data.shape}")


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update."""
    for p in params:
        _check(p)
        p.step += 1
        g = p.grad
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


def sgd_momentum_step(params: Iterable[Parameter], lr: float, momentum: float = 0.9,
                      weight_decay: float = 0.0) -> None:
    """Classical momentum: ``v <- mu v + g``; ``w <- w - lr v``."""
    for p in params:
        _check(p)
        g = p.grad if weight_decay == 0 else p.grad + weight_decay * p.data
        p.velocity *= momentum
        p.velocity += g
        p.data -= (lr * p.velocity).astype(p.data.dtype)
        p.step += 1


class Adam:
    def __init__(self, params, lr: float = 2e-4, beta1: float = 0.5, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps)


class SGD:
    def __init__(self, params, lr: float = 0.1, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        sgd_momentum_step(self.params, self.lr, self.momentum, self.weight_decay)
