"""Adam optimizer over named parameter tensors."""

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from .errors import RejectedInputError, TrainingDivergedError

Tensors = Dict[str, np.ndarray]


@dataclass(frozen=True)
class AdamHyper:
    """Adam step size, moment decays and epsilon."""

    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.step_size <= 0:
            raise RejectedInputError("step size must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise RejectedInputError("moment decays must lie in [0, 1)")
        if self.eps <= 0:
            raise RejectedInputError("epsilon must be positive")


@dataclass
class AdamState:
    """
    First and second moment estimates plus the step counter.

    Mutable; owned by a single training loop.
    """

    step: int = 0
    first: Tensors = field(default_factory=dict)
    second: Tensors = field(default_factory=dict)


def sgd_adam_step(
    params: Tensors, grads: Tensors, state: AdamState, hyper: AdamHyper = AdamHyper()
) -> Tuple[Tensors, AdamState]:
    """
    Take one Adam step.

    @param params: named parameter tensors (not modified)
    @param grads: gradients with exactly the names and shapes of params
    @param state: optimizer state from the previous step (or a fresh AdamState())
    @param hyper: step size, decays and epsilon
    @returns (updated parameters, updated state)
    @raises RejectedInputError: if names or shapes of params and grads differ
    @raises TrainingDivergedError: if any gradient entry is not finite
    """
    if params.keys() != grads.keys():
        raise RejectedInputError(
            f"parameter/gradient names differ: {sorted(set(params) ^ set(grads))}"
        )
    for name, value in params.items():
        if value.shape != grads[name].shape:
            raise RejectedInputError(f"{name}: gradient shape {grads[name].shape} != {value.shape}")
        if not np.all(np.isfinite(grads[name])):
            raise TrainingDivergedError(f"non-finite gradient for {name}")

    step = state.step + 1
    new_state = AdamState(step=step)
    new_params: Tensors = {}
    correction1 = 1.0 - hyper.beta1**step
    correction2 = 1.0 - hyper.beta2**step
    for name in sorted(params):
        value, grad = params[name], grads[name]
        first = state.first.get(name, np.zeros_like(value))
        second = state.second.get(name, np.zeros_like(value))
        first = hyper.beta1 * first + (1.0 - hyper.beta1) * grad
        second = hyper.beta2 * second + (1.0 - hyper.beta2) * grad * grad
        update = hyper.step_size * (first / correction1) / (np.sqrt(second / correction2) + hyper.eps)
        new_params[name] = (value - update).astype(value.dtype)
        new_state.first[name] = first
        new_state.second[name] = second
    return new_params, new_state
