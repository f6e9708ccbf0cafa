"""Training losses: logit-adjusted cross-entropy, distillation, and the ramp-up schedule.

Every loss returns ``(scalar value, analytic gradient w.r.t. the flat parameter
vector)``.  Gradients are exact; finite-difference checks live in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericError, UsageError
from .models import ModelParams, _backward, _forward_cached


@dataclass(frozen=True)
class ClassPrior:
    """Per-client empirical label distribution, smoothed away from exact zeros.

    The smoothing keeps ``log(pi)`` finite for clients that miss a class
    entirely, which heterogeneous partitions routinely produce.
    """

    pi: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "pi", np.asarray(self.pi, dtype=np.float64))
        if self.pi.ndim != 1 or self.pi.size < 2:
            raise ConfigurationError("class prior must be a vector of length >= 2")
        if np.any(self.pi <= 0.0):
            raise ConfigurationError("class prior entries must be strictly positive (smoothed)")
        if abs(float(self.pi.sum()) - 1.0) > 1e-9:
            raise ConfigurationError("class prior must sum to 1")

    @property
    def log_pi(self) -> np.ndarray:
        return np.log(self.pi)

    @classmethod
    def from_labels(cls, labels: np.ndarray, num_classes: int, eps: float = 1e-8) -> "ClassPrior":
        counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes).astype(np.float64)
        if counts.sum() == 0:
            return cls.uniform(num_classes)
        pi = counts / counts.sum()
        pi = np.where(pi == 0.0, eps, pi)
        return cls(pi / pi.sum())

    @classmethod
    def uniform(cls, num_classes: int) -> "ClassPrior":
        return cls(np.full(num_classes, 1.0 / num_classes))


@dataclass(frozen=True)
class LossConfig:
    """Knobs of the robust-stage loss.

    ``ramp_length=None`` means "resolve to the robust-stage length" once the
    round budget is known; the schedule itself requires a concrete value.
    """

    temperature: float = 0.8
    lambda_max: float = 0.8
    ramp_length: int | None = None
    la_enabled: bool = True

    def __post_init__(self) -> None:
        if self.temperature <= 0.0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.lambda_max <= 1.0:
            raise ConfigurationError(f"lambda_max must be in [0, 1], got {self.lambda_max}")
        if self.ramp_length is not None and self.ramp_length < 1:
            raise ConfigurationError(f"ramp_length must be >= 1, got {self.ramp_length}")

    def resolved(self, stage2_rounds: int) -> "LossConfig":
        if self.ramp_length is not None:
            return self
        return LossConfig(self.temperature, self.lambda_max, max(1, stage2_rounds), self.la_enabled)


def log_softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax, stabilised by max subtraction."""
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def tempered_softmax(logits: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(logits / temperature); rows sum to 1."""
    if temperature <= 0.0:
        raise UsageError(f"temperature must be > 0, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("logits contain non-finite entries")
    return np.exp(log_softmax(logits / temperature))


def rampup_lambda(round_in_stage2: int, cfg: LossConfig) -> float:
    """Gaussian ramp-up: lambda_max * exp(-5 (1 - min(t, R)/R)^2), clamped past R."""
    if round_in_stage2 < 0:
        raise UsageError(f"round_in_stage2 must be >= 0, got {round_in_stage2}")
    if cfg.ramp_length is None:
        raise UsageError("ramp_length is unresolved; call LossConfig.resolved() first")
    frac = min(round_in_stage2, cfg.ramp_length) / cfg.ramp_length
    return cfg.lambda_max * float(np.exp(-5.0 * (1.0 - frac) ** 2))


def _check_batch(params: ModelParams, X: np.ndarray, y: np.ndarray):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise UsageError("batch must be a non-empty 2-D feature array")
    if X.shape[0] != y.shape[0]:
        raise UsageError("feature and label counts differ")
    if X.shape[1] != params.arch.input_dim:
        raise ConfigurationError(
            f"feature dimension {X.shape[1]} does not match input_dim {params.arch.input_dim}"
        )
    c = params.arch.num_classes
    if y.min() < 0 or y.max() >= c:
        raise UsageError(f"labels must lie in [0, {c})")
    return X, y


def _ce_terms(logits: np.ndarray, y: np.ndarray, prior: ClassPrior | None, la_enabled: bool):
    """Mean cross-entropy and its gradient w.r.t. the raw logits."""
    n = logits.shape[0]
    if la_enabled:
        if prior is None:
            raise UsageError("la_enabled=True requires a class prior")
        z = logits + prior.log_pi
    else:
        z = logits
    logp = log_softmax(z)
    loss = -float(logp[np.arange(n), y].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    return loss, dlogits


def ce_loss(
    params: ModelParams,
    X: np.ndarray,
    y: np.ndarray,
    prior: ClassPrior | None = None,
    la_enabled: bool = False,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch, optionally with the log-prior logit shift.

    Returns (loss, exact gradient w.r.t. the flat parameter vector), before any
    weight decay.
    """
    X, y = _check_batch(params, X, y)
    logits, hidden = _forward_cached(params, X)
    loss, dlogits = _ce_terms(logits, y, prior, la_enabled)
    return loss, _backward(params, X, hidden, dlogits)


def kd_loss(
    params: ModelParams,
    X: np.ndarray,
    y: np.ndarray,
    teacher_logits: np.ndarray,
    lam: float,
    temperature: float,
    prior: ClassPrior | None = None,
    la_enabled: bool = False,
) -> tuple[float, np.ndarray]:
    """Distillation mixture: lam * KL(teacher || student) + (1 - lam) * cross-entropy.

    The teacher distribution is softened as softmax(teacher_logits / temperature);
    the student distribution stays at temperature 1.  The logit-prior shift is
    applied only inside the cross-entropy term, never inside the KL term (the KL
    compares distributions, not labels).
    """
    if not 0.0 <= lam <= 1.0:
        raise UsageError(f"lambda must be in [0, 1], got {lam}")
    X, y = _check_batch(params, X, y)
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    if teacher_logits.shape != (X.shape[0], params.arch.num_classes):
        raise UsageError("teacher_logits must be one row of logits per batch sample")

    logits, hidden = _forward_cached(params, X)
    ce_val, dlogits_ce = _ce_terms(logits, y, prior, la_enabled)

    n = X.shape[0]
    log_q = log_softmax(teacher_logits / temperature)
    q = np.exp(log_q)
    log_p = log_softmax(logits)
    kl_val = float((q * (log_q - log_p)).sum(axis=1).mean())
    dlogits_kl = (np.exp(log_p) - q) / n

    loss = lam * kl_val + (1.0 - lam) * ce_val
    dlogits = lam * dlogits_kl + (1.0 - lam) * dlogits_ce
    return loss, _backward(params, X, hidden, dlogits)
