"""Adam with coupled L2 weight decay, plus the shared minibatch training loop."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import NumericError, UsageError
from .models import ModelParams


@dataclass(frozen=True)
class OptimizerState:
    """Adam moments and hyperparameters for one local training loop."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    lr: float = 3e-4
    weight_decay: float = 5e-4
    batch_size: int = 16
    eps: float = 1e-8

    @classmethod
    def fresh(cls, param_count: int, **hyper) -> "OptimizerState":
        return cls(np.zeros(param_count), np.zeros(param_count), **hyper)


def adam_step(params: ModelParams, grad: np.ndarray, state: OptimizerState):
    """One bias-corrected Adam update; decay is added to the gradient before the moments."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape:
        raise UsageError(f"gradient length {grad.size} does not match parameter length {params.values.size}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("gradient contains non-finite entries")
    if state.first_moment.shape != params.values.shape:
        raise UsageError("optimizer state does not match parameter length")

    g = grad + state.weight_decay * params.values
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_values = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return ModelParams(new_values, params.arch), replace(state, first_moment=m, second_moment=v, step_count=t)


LossAndGrad = Callable[[ModelParams, np.ndarray, np.ndarray], tuple[float, np.ndarray]]


def minibatch_train(
    params: ModelParams,
    features: np.ndarray,
    labels: np.ndarray,
    loss_and_grad: LossAndGrad,
    state: OptimizerState,
    epochs: int,
    rng: np.random.Generator,
) -> tuple[ModelParams, float]:
    """Run `epochs` of shuffled minibatch Adam; returns final params and mean step loss.

    The trailing partial batch is kept.  With epochs=0 the input parameters are
    returned unchanged (copy) and the loss is nan.
    """
    if epochs < 0:
        raise UsageError(f"epochs must be >= 0, got {epochs}")
    n = len(labels)
    params = params.copy()
    if epochs == 0 or n == 0:
        return params, float("nan")
    losses = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, state.batch_size):
            idx = perm[start : start + state.batch_size]
            loss, grad = loss_and_grad(params, features[idx], labels[idx])
            params, state = adam_step(params, grad, state)
            losses.append(loss)
    return params, float(np.mean(losses))
