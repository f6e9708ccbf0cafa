"""Heterogeneous instance-dependent label noise.

Each noisy client gets a freshly trained annotator network on its own clean
data; samples the annotator finds hard are preferentially flipped, and the
replacement label is drawn from the annotator's confidences over the wrong
classes.  Because every annotator only ever sees one client's distribution,
the induced noise pattern differs per client.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .data import ClientDataset
from .errors import ConfigurationError, UsageError
from .losses import ClassPrior, ce_loss, tempered_softmax
from .models import ModelArch, forward, init_params
from .optim import OptimizerState, minibatch_train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseConfig:
    global_rate: float = 0.4
    eta_low: float = 0.3
    eta_high: float = 0.5
    annotator_epochs: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.global_rate < 1.0:
            raise ConfigurationError(f"global_rate must be in [0, 1), got {self.global_rate}")
        if not (0.0 <= self.eta_low <= self.eta_high < 1.0):
            raise ConfigurationError(
                f"need 0 <= eta_low <= eta_high < 1, got eta_low={self.eta_low}, eta_high={self.eta_high}"
            )
        if self.annotator_epochs < 1:
            raise ConfigurationError(f"annotator_epochs must be >= 1, got {self.annotator_epochs}")


def misclassification_prob(probs: np.ndarray, clean_labels: np.ndarray) -> np.ndarray:
    """1 - p(correct class) per sample; rows of `probs` must each sum to 1."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(clean_labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise UsageError("probs must have one row per label")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise UsageError("probability rows must sum to 1")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= probs.shape[1]:
        raise UsageError(f"labels must lie in [0, {probs.shape[1]})")
    return 1.0 - probs[np.arange(labels.size), labels]


def weighted_sample_without_replacement(weights: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Exponential-keys sampling: k distinct indices, probability proportional to weight.

    Zero-weight items are only drawn once the positive-weight items run out
    (uniformly at random among themselves).
    """
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise UsageError("weights must be finite and non-negative")
    if not 0 <= k <= weights.size:
        raise UsageError(f"cannot draw {k} of {weights.size} items")
    u = rng.random(weights.size)
    keys = np.where(weights > 0, u ** (1.0 / np.where(weights > 0, weights, 1.0)), -u)
    top = np.argpartition(-keys, k - 1)[:k] if k > 0 else np.empty(0, dtype=np.int64)
    return np.sort(top)


def _train_annotator(client: ClientDataset, arch: ModelArch, epochs: int, rng: np.random.Generator):
    params = init_params(arch, rng)
    state = OptimizerState.fresh(arch.param_count)

    def step(p, xb, yb):
        return ce_loss(p, xb, yb)

    params, _ = minibatch_train(params, client.features, client.clean_labels, step, state, epochs, rng)
    return params


def _flip_labels(client: ClientDataset, cfg: NoiseConfig, arch: ModelArch, rng: np.random.Generator) -> ClientDataset:
    annotator = _train_annotator(client, arch, cfg.annotator_epochs, rng)
    probs = tempered_softmax(forward(annotator, client.features), 1.0)
    p_mis = misclassification_prob(probs, client.clean_labels)
    eta = rng.uniform(cfg.eta_low, cfg.eta_high)
    n_flip = math.floor(eta * client.size)

    observed = client.clean_labels.copy()
    flipped = np.zeros(client.size, dtype=bool)
    if n_flip < 1:
        log.warning("client %d: eta=%.3f over %d samples yields zero flips", client.client_id, eta, client.size)
    else:
        chosen = weighted_sample_without_replacement(p_mis, n_flip, rng)
        c = client.class_count
        for t in chosen:
            dist = probs[t].copy()
            dist[client.clean_labels[t]] = 0.0
            total = dist.sum()
            if total <= 0.0:
                # annotator put all mass on the true class: fall back to uniform
                dist[:] = 1.0 / (c - 1)
                dist[client.clean_labels[t]] = 0.0
            else:
                dist /= total
            observed[t] = rng.choice(c, p=dist)
            flipped[t] = True

    return ClientDataset(
        client_id=client.client_id,
        features=client.features,
        observed_labels=observed,
        clean_labels=client.clean_labels.copy(),
        flipped=flipped,
        class_count=client.class_count,
        is_noisy_truth=True,
        noise_rate_truth=float(eta),
        prior=ClassPrior.from_labels(observed, client.class_count),
    )


def generate_noise(
    clients: list[ClientDataset],
    cfg: NoiseConfig,
    arch: ModelArch | None = None,
) -> list[ClientDataset]:
    """Flip labels on floor(global_rate * K) uniformly chosen clients.

    Untouched clients are passed through unchanged.  Each noisy client runs on
    its own spawned RNG stream, so the output is independent of processing
    order.  `arch` defaults to a linear model matching the data.
    """
    if any(cl.flipped.any() for cl in clients):
        raise UsageError("generate_noise expects noise-free clients")
    k = len(clients)
    n_noisy = math.floor(cfg.global_rate * k)
    if n_noisy == 0:
        return list(clients)

    if arch is None:
        dim = clients[0].features.shape[1]
        arch = ModelArch(input_dim=dim, num_classes=clients[0].class_count)

    streams = np.random.SeedSequence(cfg.seed).spawn(k + 1)
    select_rng = np.random.default_rng(streams[0])
    noisy_positions = set(select_rng.choice(k, size=n_noisy, replace=False).tolist())

    out = []
    for pos, client in enumerate(clients):
        if pos in noisy_positions:
            out.append(_flip_labels(client, cfg, arch, np.random.default_rng(streams[pos + 1])))
        else:
            out.append(client)
    return out
