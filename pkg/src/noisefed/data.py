"""Synthetic class-imbalanced data and heterogeneous client partitioning.

The global set is a mixture of isotropic Gaussian blobs, one per class, split
70/30 into train/test stratified by class.  Partitioning draws a Bernoulli
class-ownership matrix and then splits each class across its owners with a
Dirichlet proportion vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .losses import ClassPrior

TRAIN_FRACTION = 0.7


@dataclass
class GlobalDataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    class_count: int
    class_profile: np.ndarray  # per-class counts over train + test

    def __post_init__(self) -> None:
        if int(np.count_nonzero(self.class_profile)) < 2:
            raise ConfigurationError("dataset needs at least 2 non-empty classes")
        if int(self.class_profile.sum()) != len(self.train_y) + len(self.test_y):
            raise ConfigurationError("class_profile does not sum to the dataset size")

    @property
    def size(self) -> int:
        return len(self.train_y) + len(self.test_y)

    @property
    def feature_dim(self) -> int:
        return self.train_x.shape[1]


@dataclass(frozen=True)
class PartitionConfig:
    client_count: int = 20
    dirichlet_alpha: float = 2.0
    bernoulli_p: float = 0.9
    seed: int = 0

    def __post_init__(self) -> None:
        if self.client_count < 1:
            raise ConfigurationError(f"client_count must be >= 1, got {self.client_count}")
        if self.dirichlet_alpha <= 0.0:
            raise ConfigurationError(f"dirichlet_alpha must be > 0, got {self.dirichlet_alpha}")
        if not 0.0 < self.bernoulli_p <= 1.0:
            raise ConfigurationError(f"bernoulli_p must be in (0, 1], got {self.bernoulli_p}")


@dataclass
class ClientDataset:
    """One client's samples, with clean labels kept for bookkeeping only.

    Training code must never read ``clean_labels``; they exist so the noise
    generator and the detection metrics can be scored against ground truth.
    """

    client_id: int
    features: np.ndarray
    observed_labels: np.ndarray
    clean_labels: np.ndarray
    flipped: np.ndarray
    class_count: int
    is_noisy_truth: bool = False
    noise_rate_truth: float | None = None
    prior: ClassPrior = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        n = len(self.features)
        if not (len(self.observed_labels) == len(self.clean_labels) == len(self.flipped) == n):
            raise ConfigurationError("client arrays have inconsistent lengths")
        if not np.array_equal(self.flipped, self.observed_labels != self.clean_labels):
            raise ConfigurationError("flipped flags are inconsistent with the labels")
        if not self.is_noisy_truth and self.flipped.any():
            raise ConfigurationError("a clean client cannot carry flipped samples")
        if self.prior is None:
            self.prior = ClassPrior.from_labels(self.observed_labels, self.class_count)

    @property
    def size(self) -> int:
        return len(self.observed_labels)


def long_tailed_counts(class_count: int, largest: int, imbalance_ratio: float) -> np.ndarray:
    """Geometric per-class counts decaying from `largest` down to `largest / ratio`."""
    if class_count < 2 or largest < 1 or imbalance_ratio < 1.0:
        raise ConfigurationError("need class_count >= 2, largest >= 1, imbalance_ratio >= 1")
    decay = imbalance_ratio ** (-1.0 / (class_count - 1))
    counts = np.round(largest * decay ** np.arange(class_count)).astype(int)
    return np.maximum(counts, 1)


def generate_global(
    class_count: int,
    per_class_counts,
    feature_dim: int,
    blob_spread: float,
    seed: int,
    class_means: np.ndarray | None = None,
    mean_scale: float = 1.0,
) -> GlobalDataset:
    """Gaussian-blob dataset with a 70/30 stratified train/test split.

    Blob means default to draws from N(0, (mean_scale * blob_spread)^2 I); pass
    `class_means` to place them explicitly.
    """
    counts = np.asarray(per_class_counts, dtype=np.int64)
    if counts.shape != (class_count,):
        raise ConfigurationError(f"per_class_counts must have length {class_count}")
    if np.any(counts < 0):
        raise ConfigurationError("per_class_counts must be non-negative")
    if int(np.count_nonzero(counts)) < 2:
        raise ConfigurationError("at least 2 classes must be non-empty")
    if feature_dim < 1 or blob_spread <= 0.0:
        raise ConfigurationError("feature_dim must be >= 1 and blob_spread > 0")

    rng = np.random.default_rng(seed)
    if class_means is None:
        class_means = rng.normal(size=(class_count, feature_dim)) * (mean_scale * blob_spread)
    else:
        class_means = np.asarray(class_means, dtype=np.float64)
        if class_means.shape != (class_count, feature_dim):
            raise ConfigurationError("class_means must have shape (class_count, feature_dim)")

    train_parts, test_parts = [], []
    for c in range(class_count):
        n = int(counts[c])
        if n == 0:
            continue
        x = class_means[c] + blob_spread * rng.normal(size=(n, feature_dim))
        order = rng.permutation(n)
        n_train = int(round(TRAIN_FRACTION * n))
        train_parts.append((x[order[:n_train]], np.full(n_train, c, dtype=np.int64)))
        test_parts.append((x[order[n_train:]], np.full(n - n_train, c, dtype=np.int64)))

    train_x = np.concatenate([p[0] for p in train_parts])
    train_y = np.concatenate([p[1] for p in train_parts])
    test_x = np.concatenate([p[0] for p in test_parts])
    test_y = np.concatenate([p[1] for p in test_parts])
    shuffle = rng.permutation(len(train_y))
    return GlobalDataset(train_x[shuffle], train_y[shuffle], test_x, test_y, class_count, counts)


def _largest_remainder(fractions: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of `total` proportional to `fractions`, conserving the sum."""
    raw = fractions * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def _draw_ownership(rng: np.random.Generator, k: int, active: np.ndarray, p: float) -> np.ndarray:
    """Bernoulli class-ownership matrix; all-zero rows and active all-zero columns are redrawn."""
    phi = rng.random((k, active.size)) < p
    for _ in range(100):
        bad_rows = ~phi.any(axis=1)
        if bad_rows.any():
            phi[bad_rows] = rng.random((int(bad_rows.sum()), active.size)) < p
            continue
        bad_cols = active & ~phi.any(axis=0)
        if bad_cols.any():
            phi[:, bad_cols] = rng.random((k, int(bad_cols.sum()))) < p
            continue
        return phi
    raise ConfigurationError("could not draw a usable class-ownership matrix in 100 retries")


def partition(data: GlobalDataset, cfg: PartitionConfig) -> list[ClientDataset]:
    """Split the training set across clients; every sample lands on exactly one client."""
    k, c = cfg.client_count, data.class_count
    if k > len(data.train_y):
        raise ConfigurationError(f"cannot split {len(data.train_y)} samples across {k} clients")
    rng = np.random.default_rng(cfg.seed)
    active = np.asarray([np.count_nonzero(data.train_y == j) > 0 for j in range(c)])
    phi = _draw_ownership(rng, k, active, cfg.bernoulli_p)

    assigned: list[list[np.ndarray]] = [[] for _ in range(k)]
    for cls in range(c):
        idx = np.flatnonzero(data.train_y == cls)
        if idx.size == 0:
            continue
        owners = np.flatnonzero(phi[:, cls])
        props = rng.dirichlet(np.full(owners.size, cfg.dirichlet_alpha))
        counts = _largest_remainder(props, idx.size)
        idx = rng.permutation(idx)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        for j, owner in enumerate(owners):
            chunk = idx[offsets[j] : offsets[j + 1]]
            if chunk.size:
                assigned[owner].append(chunk)

    clients = []
    for i in range(k):
        sel = np.concatenate(assigned[i]) if assigned[i] else np.empty(0, dtype=np.int64)
        labels = data.train_y[sel]
        clients.append(
            ClientDataset(
                client_id=i,
                features=data.train_x[sel],
                observed_labels=labels.copy(),
                clean_labels=labels.copy(),
                flipped=np.zeros(sel.size, dtype=bool),
                class_count=c,
            )
        )
    return clients


def save_client_samples(clients: list[ClientDataset], path) -> None:
    """One sample per line: client_id,clean,observed,feature,feature,..."""
    with open(path, "w", encoding="utf-8") as fh:
        for cl in clients:
            for j in range(cl.size):
                feats = ",".join(repr(float(v)) for v in cl.features[j])
                fh.write(f"{cl.client_id},{int(cl.clean_labels[j])},{int(cl.observed_labels[j])},{feats}\n")


def load_client_samples(path, class_count: int) -> list[ClientDataset]:
    """Inverse of save_client_samples; noisy-truth flags are inferred from flips."""
    rows: dict[int, list[tuple[int, int, np.ndarray]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(",")
            if len(parts) < 4:
                raise ConfigurationError(f"{path}:{line_no}: expected client,clean,observed,features")
            cid, clean, obs = int(parts[0]), int(parts[1]), int(parts[2])
            rows.setdefault(cid, []).append((clean, obs, np.asarray([float(v) for v in parts[3:]])))
    clients = []
    for cid in sorted(rows):
        clean = np.asarray([r[0] for r in rows[cid]], dtype=np.int64)
        obs = np.asarray([r[1] for r in rows[cid]], dtype=np.int64)
        feats = np.vstack([r[2] for r in rows[cid]])
        flipped = obs != clean
        clients.append(
            ClientDataset(
                client_id=cid,
                features=feats,
                observed_labels=obs,
                clean_labels=clean,
                flipped=flipped,
                class_count=class_count,
                is_noisy_truth=bool(flipped.any()),
            )
        )
    return clients
