"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DiffArray


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_param(cls, param: DiffArray, beta1=0.9, beta2=0.999, epsilon=1e-8) -> "AdamState":
        return cls(np.zeros_like(param.values), np.zeros_like(param.values), 0, beta1, beta2, epsilon)


def adam_update(param: DiffArray, state: AdamState, lr: float) -> tuple[DiffArray, AdamState]:
    """Apply one bias-corrected Adam step in place and return ``(param, state)``."""
    if param.grad is None:
        raise ValueError(f"parameter {param.name or param.shape} has no gradient")
    if state.first_moment.shape != param.shape:
        raise ValueError("Adam moments are not shape-congruent with the parameter")
    g = param.grad
    b1, b2 = state.beta1, state.beta2
    state.step_count += 1
    state.first_moment *= b1
    state.first_moment += (1.0 - b1) * g
    state.second_moment *= b2
    state.second_moment += (1.0 - b2) * (g * g)
    m_hat = state.first_moment / (1.0 - b1 ** state.step_count)
    v_hat = state.second_moment / (1.0 - b2 ** state.step_count)
    param.values -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return param, state


@dataclass
class Adam:
    """Adam over a named parameter dict; one shared step count."""

    params: dict
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    states: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            if name not in self.states:
                self.states[name] = AdamState.for_param(p, self.beta1, self.beta2, self.epsilon)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                # untouched parameter this step: zero gradient still decays the moments
                p.grad = np.zeros_like(p.values)
            adam_update(p, self.states[name], self.lr)

    @property
    def step_count(self) -> int:
        return next(iter(self.states.values())).step_count if self.states else 0
