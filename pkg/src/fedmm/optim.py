"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .exceptions import ConfigError, ContractError


class Adam:
    """Standard Adam with bias correction, updating parameters in place.

    ``step`` consumes the gradients accumulated on each parameter and zeroes
    them afterwards; calling it with any gradient missing is a caller error.
    Moment buffers are keyed by position, so the named parameter list must
    stay stable for the lifetime of the optimizer.
    """

    def __init__(
        self,
        named_params: Sequence[tuple[str, Tensor]],
        learning_rate: float = 0.001,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        if not 0.0 < beta1 < 1.0 or not 0.0 < beta2 < 1.0:
            raise ConfigError(f"Adam betas must lie in (0, 1), got {beta1}, {beta2}")
        if epsilon <= 0.0:
            raise ConfigError(f"Adam epsilon must be positive, got {epsilon}")
        if learning_rate <= 0.0:
            raise ConfigError(f"learning rate must be positive, got {learning_rate}")
        self.named_params = list(named_params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.first_moment = [np.zeros_like(p.data) for _, p in self.named_params]
        self.second_moment = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self) -> None:
        for name, param in self.named_params:
            if param.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient")
        self.step_count += 1
        t = self.step_count
        corr1 = 1.0 - self.beta1 ** t
        corr2 = 1.0 - self.beta2 ** t
        for (name, param), m, v in zip(self.named_params, self.first_moment, self.second_moment):
            g = param.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / corr1
            v_hat = v / corr2
            param.data -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)
            param.grad = None

    def zero_grad(self) -> None:
        for _, param in self.named_params:
            param.grad = None
