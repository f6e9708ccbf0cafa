"""Small differentiable classifiers stored as flat parameter vectors.

Two architectures are supported: plain linear-softmax and a one-hidden-layer
tanh MLP.  All forward/backward passes are written out explicitly so that the
rest of the package never depends on an autodiff framework.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericError


@dataclass(frozen=True)
class ModelArch:
    """Architecture descriptor.  ``hidden_dim=None`` selects the linear model."""

    input_dim: int
    num_classes: int
    hidden_dim: int | None = None

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise ConfigurationError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.hidden_dim is not None and self.hidden_dim < 1:
            raise ConfigurationError(f"hidden_dim must be >= 1 or None, got {self.hidden_dim}")

    @property
    def param_count(self) -> int:
        d, c, h = self.input_dim, self.num_classes, self.hidden_dim
        if h is None:
            return c * d + c
        return h * d + h + c * h + c


@dataclass
class ModelParams:
    """Flat float64 parameter vector plus its architecture.

    Layout: linear stores W (C x d, row-major) then b (C).  The MLP stores
    W1 (h x d), b1 (h), W2 (C x h), b2 (C), in that order.  Keeping a single
    contiguous vector makes aggregation and parameter distances trivial.
    """

    values: np.ndarray
    arch: ModelArch

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.shape[0] != self.arch.param_count:
            raise ConfigurationError(
                f"parameter vector has length {self.values.size}, "
                f"architecture requires {self.arch.param_count}"
            )
        if not np.all(np.isfinite(self.values)):
            raise NumericError("parameter vector contains non-finite entries")

    def copy(self) -> "ModelParams":
        return ModelParams(self.values.copy(), self.arch)


def zero_params(arch: ModelArch) -> ModelParams:
    return ModelParams(np.zeros(arch.param_count), arch)


def init_params(arch: ModelArch, rng: np.random.Generator) -> ModelParams:
    """Gaussian fan-in init for weights, zero biases."""
    d, c, h = arch.input_dim, arch.num_classes, arch.hidden_dim
    v = np.zeros(arch.param_count)
    if h is None:
        v[: c * d] = rng.normal(size=c * d) / np.sqrt(d)
    else:
        v[: h * d] = rng.normal(size=h * d) / np.sqrt(d)
        off = h * d + h
        v[off : off + c * h] = rng.normal(size=c * h) / np.sqrt(h)
    return ModelParams(v, arch)


def _views(params: ModelParams):
    """Reshaped views into the flat vector, following the documented layout."""
    d, c, h = params.arch.input_dim, params.arch.num_classes, params.arch.hidden_dim
    v = params.values
    if h is None:
        return v[: c * d].reshape(c, d), v[c * d :]
    w1 = v[: h * d].reshape(h, d)
    b1 = v[h * d : h * d + h]
    off = h * d + h
    w2 = v[off : off + c * h].reshape(c, h)
    b2 = v[off + c * h :]
    return w1, b1, w2, b2


def forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Raw logits for a single feature vector (1-D) or a batch (2-D)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != params.arch.input_dim:
        raise ConfigurationError(
            f"feature dimension {X.shape[-1] if X.ndim else '?'} does not match "
            f"architecture input_dim {params.arch.input_dim}"
        )
    logits, _ = _forward_cached(params, X)
    return logits[0] if single else logits


def _forward_cached(params: ModelParams, X: np.ndarray):
    """Batch forward pass returning (logits, hidden activations or None)."""
    if params.arch.hidden_dim is None:
        w, b = _views(params)
        return X @ w.T + b, None
    w1, b1, w2, b2 = _views(params)
    hidden = np.tanh(X @ w1.T + b1)
    return hidden @ w2.T + b2, hidden


def _backward(params: ModelParams, X: np.ndarray, hidden, dlogits: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the flat vector, given d(loss)/d(logits)."""
    grad = np.empty_like(params.values)
    d, c, h = params.arch.input_dim, params.arch.num_classes, params.arch.hidden_dim
    if h is None:
        grad[: c * d] = (dlogits.T @ X).ravel()
        grad[c * d :] = dlogits.sum(axis=0)
        return grad
    w1, b1, w2, b2 = _views(params)
    grad[h * d + h : h * d + h + c * h] = (dlogits.T @ hidden).ravel()
    grad[h * d + h + c * h :] = dlogits.sum(axis=0)
    dhidden = dlogits @ w2
    dz1 = dhidden * (1.0 - hidden * hidden)
    grad[: h * d] = (dz1.T @ X).ravel()
    grad[h * d : h * d + h] = dz1.sum(axis=0)
    return grad
