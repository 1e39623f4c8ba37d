"""Bias-corrected Adam on flat parameter vectors.

Operating on the flat view keeps local training, aggregation, and replay
oracles in one numeric representation. Steps are pure: they return new
arrays and never mutate their inputs.
"""

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.first_moment.shape != self.second_moment.shape:
            raise ValueError("moment vectors must have equal length")
        if self.step_count < 0:
            raise ValueError(f"step_count must be >= 0, got {self.step_count}")


def init_adam_state(
    num_params: int,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    dtype=np.float32,
) -> OptimizerState:
    """Fresh zero-moment state for a parameter vector of the given length."""
    zeros = np.zeros(num_params, dtype=dtype)
    return OptimizerState(
        first_moment=zeros,
        second_moment=zeros.copy(),
        step_count=0,
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(
    params: np.ndarray, grad: np.ndarray, state: OptimizerState
) -> tuple[np.ndarray, OptimizerState]:
    """One Adam update: returns (new params, new state).

    Moments are decayed even for a zero gradient; bias correction uses the
    incremented step count.
    """
    if params.shape != grad.shape or params.shape != state.first_moment.shape:
        raise ValueError(
            f"length mismatch: params {params.shape}, grad {grad.shape}, "
            f"moments {state.first_moment.shape}"
        )
    step = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, first_moment=m, second_moment=v, step_count=step)
