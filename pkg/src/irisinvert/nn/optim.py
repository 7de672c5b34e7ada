from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import torch


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    first_moment: torch.Tensor
    second_moment: torch.Tensor
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def like(cls, params: torch.Tensor, beta1: float = 0.9, beta2: float = 0.999,
             epsilon: float = 1e-8) -> "OptimizerState":
        return cls(torch.zeros_like(params), torch.zeros_like(params), 0, beta1, beta2, epsilon)


@torch.no_grad()
def adam_step(params: torch.Tensor, grads: torch.Tensor, state: OptimizerState, lr: float,
              name: str = "params") -> torch.Tensor:
    """Bias-corrected Adam update. Updates ``params`` and ``state`` in place and returns ``params``."""
    if params.shape != grads.shape:
        raise ValueError(f"{name}: grad shape {tuple(grads.shape)} != param shape {tuple(params.shape)}")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not torch.isfinite(grads).all():
        raise NonFiniteGradientError(f"non-finite gradient in {name}")
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    state.first_moment.mul_(b1).add_(grads, alpha=1 - b1)
    state.second_moment.mul_(b2).addcmul_(grads, grads, value=1 - b2)
    m_hat = state.first_moment / (1 - b1 ** state.step_count)
    v_hat = state.second_moment / (1 - b2 ** state.step_count)
    params.sub_(lr * m_hat / (v_hat.sqrt() + state.epsilon))
    return params


class Adam:
    """Adam over named module parameters, one :class:`OptimizerState` each."""

    def __init__(self, named_params: Iterable[tuple[str, torch.nn.Parameter]], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = [(n, p) for n, p in named_params if p.requires_grad]
        self.lr = lr
        self.states = {n: OptimizerState.like(p.detach(), betas[0], betas[1], eps) for n, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        # check everything first so a bad gradient leaves all parameters untouched
        for n, p in self.params:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteGradientError(f"non-finite gradient in {n}")
        for n, p in self.params:
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, self.states[n], self.lr, name=n)
