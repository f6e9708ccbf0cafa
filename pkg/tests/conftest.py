import numpy as np
import pytest

from noisefed.models import ModelArch, ModelParams, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_arch(rng, hidden: bool) -> ModelArch:
    d = int(rng.integers(2, 9))
    c = int(rng.integers(2, 6))
    h = int(rng.integers(3, 8)) if hidden else None
    return ModelArch(input_dim=d, num_classes=c, hidden_dim=h)


def random_params(arch: ModelArch, rng) -> ModelParams:
    p = init_params(arch, rng)
    return ModelParams(p.values + 0.3 * rng.normal(size=arch.param_count), arch)


def finite_difference_grad(loss_fn, params: ModelParams, step: float = 1e-5) -> np.ndarray:
    """Central differences over the flat parameter vector (independent oracle)."""
    grad = np.zeros_like(params.values)
    for i in range(params.values.size):
        bumped = params.values.copy()
        bumped[i] += step
        up = loss_fn(ModelParams(bumped, params.arch))
        bumped[i] -= 2 * step
        down = loss_fn(ModelParams(bumped, params.arch))
        grad[i] = (up - down) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
