from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Moment buffers for one parameter tensor."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    learning_rate: float
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, learning_rate: float) -> "AdamState":
        if learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        return cls(np.zeros_like(param, dtype=np.float64),
                   np.zeros_like(param, dtype=np.float64), float(learning_rate))


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Returns a new parameter array; ``state`` is advanced in place."""
    if param.shape != grad.shape:
        raise ValueError(f"param {param.shape} and grad {grad.shape} differ")
    state.step_count += 1
    t = state.step_count
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * (grad * grad)
    m_hat = state.first_moment / (1.0 - state.beta1 ** t)
    v_hat = state.second_moment / (1.0 - state.beta2 ** t)
    return param - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps), state


@dataclass
class Adam:
    """Adam over a name -> array mapping, lazily creating per-parameter state."""

    learning_rate: float
    states: dict[str, AdamState] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             names=None) -> None:
        for name in (params if names is None else names):
            st = self.states.get(name)
            if st is None:
                st = self.states[name] = AdamState.zeros_like(params[name], self.learning_rate)
            params[name], _ = adam_step(params[name], grads[name], st)
