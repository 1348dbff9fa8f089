"""First-order optimizers over named parameter blocks."""

import logging
from typing import Dict, Mapping

import numpy as np

from .autodiff import Tensor
from .exceptions import NonFiniteGradientError, ParameterError

logger = logging.getLogger(__name__)


class Optimizer:
    """Base class: holds the blocks and checks gradients before every step"""

    def __init__(self, blocks: Mapping[str, Tensor], lr: float):
        if lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {lr}")
        self.blocks = dict(blocks)
        self.lr = lr
        self.steps = 0

    def zero_grad(self):
        for tensor in self.blocks.values():
            tensor.zero_grad()

    def _gradients(self) -> Dict[str, np.ndarray]:
        grads = {}
        for name, tensor in self.blocks.items():
            grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            if not np.all(np.isfinite(grad)):
                raise NonFiniteGradientError(name)
            grads[name] = grad
        return grads

    def step(self):
        grads = self._gradients()
        self.steps += 1
        for name, tensor in self.blocks.items():
            tensor.data = tensor.data - self._update(name, grads[name])

    def _update(self, name: str, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class SGD(Optimizer):
    """theta <- theta - lr * grad"""

    def _update(self, name, grad):
        return self.lr * grad


class Adam(Optimizer):
    """Adam with bias-corrected first and second moments"""

    def __init__(self, blocks: Mapping[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(blocks, lr)
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ParameterError(f"Adam betas must lie in [0, 1), got {beta1}, {beta2}")
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {name: np.zeros_like(t.data) for name, t in self.blocks.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in self.blocks.items()}

    def _update(self, name, grad):
        self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
        self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad
        m_hat = self.m[name] / (1.0 - self.beta1 ** self.steps)
        v_hat = self.v[name] / (1.0 - self.beta2 ** self.steps)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, blocks: Mapping[str, Tensor], lr: float, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> Optimizer:
    if kind == "sgd":
        return SGD(blocks, lr)
    if kind == "adam":
        return Adam(blocks, lr, beta1, beta2, eps)
    raise ParameterError(f"unknown optimizer '{kind}'")
