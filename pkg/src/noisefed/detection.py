"""Noisy-client identification from per-class loss indicators.

The server collects one loss vector per client (mean cross-entropy of the
warm-up global model, grouped by observed label), fills class-missing cells
with the column minimum, min-max normalises each class column, and fits a
two-component diagonal GMM.  The component whose mean vector has the smaller
norm is declared clean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .data import ClientDataset
from .errors import ConfigurationError, UsageError
from .losses import log_softmax
from .models import ModelParams, _forward_cached

VAR_FLOOR = 1e-6


@dataclass
class IndicatorMatrix:
    """K x C loss matrix with a presence mask for class-missing cells."""

    values: np.ndarray
    present: np.ndarray
    client_ids: list[int]

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.present = np.asarray(self.present, dtype=bool)
        if self.values.shape != self.present.shape or self.values.ndim != 2:
            raise ConfigurationError("values and presence mask must be matching 2-D arrays")
        if len(self.client_ids) != self.values.shape[0]:
            raise ConfigurationError("one client id per row required")
        if not np.all(np.isfinite(self.values[self.present])):
            raise ConfigurationError("present cells must be finite")


@dataclass
class GmmModel:
    """Two diagonal Gaussian components in indicator space."""

    means: np.ndarray  # (2, C)
    variances: np.ndarray  # (2, C), floored
    weights: np.ndarray  # (2,)
    log_likelihoods: list[float]


@dataclass
class DetectionResult:
    clean_ids: set[int]
    noisy_ids: set[int]
    noisy_posterior: dict[int, float]

    def __post_init__(self) -> None:
        if self.clean_ids & self.noisy_ids:
            raise ConfigurationError("clean and noisy sets must be disjoint")


def per_class_losses(params: ModelParams, client: ClientDataset) -> tuple[np.ndarray, np.ndarray]:
    """Mean raw-logit cross-entropy per observed-label class; nan where the class is absent.

    No prior shift enters here: the indicator must be the same function on
    every client.
    """
    c = client.class_count
    values = np.full(c, np.nan)
    mask = np.zeros(c, dtype=bool)
    if client.size == 0:
        return values, mask
    logits, _ = _forward_cached(params, client.features)
    sample_losses = -log_softmax(logits)[np.arange(client.size), client.observed_labels]
    counts = np.bincount(client.observed_labels, minlength=c)
    sums = np.bincount(client.observed_labels, weights=sample_losses, minlength=c)
    mask = counts > 0
    values[mask] = sums[mask] / counts[mask]
    return values, mask


def build_indicator_matrix(params: ModelParams, clients: list[ClientDataset]) -> IndicatorMatrix:
    rows, masks = zip(*(per_class_losses(params, cl) for cl in clients))
    return IndicatorMatrix(np.vstack(rows), np.vstack(masks), [cl.client_id for cl in clients])


def global_average_loss(params: ModelParams, clients: list[ClientDataset]) -> IndicatorMatrix:
    """Single-column indicator: each client's mean loss over all of its samples.

    This is the class-agnostic baseline the per-class indicator is meant to
    replace; it exists for the ablation grid.
    """
    vals = []
    for cl in clients:
        logits, _ = _forward_cached(params, cl.features)
        losses = -log_softmax(logits)[np.arange(cl.size), cl.observed_labels]
        vals.append(losses.mean() if cl.size else np.nan)
    vals = np.asarray(vals)[:, None]
    return IndicatorMatrix(vals, np.isfinite(vals), [cl.client_id for cl in clients])


def impute_missing(matrix: IndicatorMatrix) -> IndicatorMatrix:
    """Fill each absent cell with the column minimum over present cells."""
    values = matrix.values.copy()
    for c in range(values.shape[1]):
        col_present = matrix.present[:, c]
        if not col_present.any():
            raise ConfigurationError(f"class {c} is absent on every client; cannot impute")
        if not col_present.all():
            values[~col_present, c] = values[col_present, c].min()
    return IndicatorMatrix(values, np.ones_like(matrix.present), list(matrix.client_ids))


def normalize_columns(matrix: IndicatorMatrix) -> IndicatorMatrix:
    """Min-max normalise each column to [0, 1]; constant columns map to zeros."""
    if not matrix.present.all():
        raise UsageError("normalize_columns requires a fully imputed matrix")
    values = matrix.values.copy()
    lo = values.min(axis=0)
    hi = values.max(axis=0)
    span = hi - lo
    constant = span == 0.0
    span = np.where(constant, 1.0, span)
    values = (values - lo) / span
    values[:, constant] = 0.0
    return IndicatorMatrix(values, matrix.present.copy(), list(matrix.client_ids))


def _log_densities(x: np.ndarray, model_means: np.ndarray, model_vars: np.ndarray, model_weights: np.ndarray):
    """Row-wise log(weight_k * N(x | mean_k, diag var_k)) for both components."""
    out = np.empty((x.shape[0], 2))
    for k in range(2):
        diff = x - model_means[k]
        out[:, k] = (
            np.log(model_weights[k])
            - 0.5 * np.sum(np.log(2.0 * np.pi * model_vars[k]))
            - 0.5 * np.sum(diff * diff / model_vars[k], axis=1)
        )
    return out


def _responsibilities(model: GmmModel, x: np.ndarray) -> np.ndarray:
    logd = _log_densities(x, model.means, model.variances, model.weights)
    # max-shift normalisation keeps exact ties at exactly 0.5
    shifted = np.exp(logd - logd.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def fit_gmm(
    matrix: IndicatorMatrix,
    seed: int,
    max_iters: int = 200,
    tol: float = 1e-6,
    init_jitter: float = 0.5,
) -> GmmModel:
    """EM for a two-component diagonal GMM over the indicator rows.

    Initialisation splits the rows at the median row norm, takes the two
    halves' statistics, and then jitters the means with seed-derived noise so
    that repeated fits with different seeds can land in different local optima.
    """
    if not matrix.present.all():
        raise UsageError("fit_gmm requires a fully imputed matrix")
    x = matrix.values
    k = x.shape[0]
    if k < 2:
        raise UsageError(f"need at least 2 clients to fit a mixture, got {k}")
    rng = np.random.default_rng(seed)

    order = np.argsort(np.linalg.norm(x, axis=1), kind="stable")
    halves = (order[: k // 2], order[k // 2 :])
    means = np.vstack([x[h].mean(axis=0) for h in halves])
    variances = np.maximum(np.vstack([x[h].var(axis=0) for h in halves]), VAR_FLOOR)
    weights = np.asarray([h.size / k for h in halves])
    # jitter scales with each component's own spread: tight components stay
    # anchored, ambiguous ones get genuine seed-to-seed diversity
    means = means + rng.normal(size=means.shape) * (init_jitter * np.sqrt(variances))

    trace: list[float] = []
    prev = -np.inf
    for _ in range(max_iters):
        logd = _log_densities(x, means, variances, weights)
        norm = logsumexp(logd, axis=1, keepdims=True)
        ll = float(norm.sum())
        trace.append(ll)
        resp = np.exp(logd - norm)

        nk = resp.sum(axis=0) + 1e-12
        weights = np.clip(nk / k, 1e-12, 1.0)
        weights = weights / weights.sum()
        means = (resp.T @ x) / nk[:, None]
        for j in range(2):
            diff = x - means[j]
            variances[j] = np.maximum((resp[:, j] @ (diff * diff)) / nk[j], VAR_FLOOR)

        if abs(ll - prev) < tol:
            break
        prev = ll
    return GmmModel(means, variances, weights, trace)


def split_clients(matrix: IndicatorMatrix, model: GmmModel) -> DetectionResult:
    """Assign each client to its higher-responsibility component.

    The component with the smaller mean-vector norm is the clean one.  A
    posterior tie goes to clean: wrongly discounting a clean client costs more
    than under-discounting a noisy one.
    """
    resp = _responsibilities(model, matrix.values)
    clean_comp = int(np.argmin(np.linalg.norm(model.means, axis=1)))
    noisy_comp = 1 - clean_comp
    clean, noisy, posterior = set(), set(), {}
    for row, cid in enumerate(matrix.client_ids):
        p_noisy = float(resp[row, noisy_comp])
        posterior[cid] = p_noisy
        (noisy if p_noisy > 0.5 else clean).add(cid)
    return DetectionResult(clean, noisy, posterior)


def detection_metrics(result: DetectionResult, truth: dict[int, bool]) -> tuple[float, float, bool]:
    """(recall, precision, exact-set match) of the detected noisy set vs ground truth."""
    universe = result.clean_ids | result.noisy_ids
    if set(truth) != universe:
        raise UsageError("truth must cover exactly the detected client universe")
    truth_noisy = {cid for cid, flag in truth.items() if flag}
    hit = len(result.noisy_ids & truth_noisy)
    recall = hit / len(truth_noisy) if truth_noisy else 1.0
    if result.noisy_ids:
        precision = hit / len(result.noisy_ids)
    else:
        precision = 1.0 if not truth_noisy else 0.0
    return recall, precision, result.noisy_ids == truth_noisy


def save_indicator_matrix(matrix: IndicatorMatrix, path) -> None:
    """Tab-separated table: header of class ids, then one row per client ("NA" = absent)."""
    with open(path, "w", encoding="utf-8") as fh:
        cols = "\t".join(str(c) for c in range(matrix.values.shape[1]))
        fh.write(f"client_id\t{cols}\n")
        for row, cid in enumerate(matrix.client_ids):
            cells = [
                repr(float(matrix.values[row, c])) if matrix.present[row, c] else "NA"
                for c in range(matrix.values.shape[1])
            ]
            fh.write(str(cid) + "\t" + "\t".join(cells) + "\n")


def load_indicator_matrix(path) -> IndicatorMatrix:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("client_id"):
        raise ConfigurationError(f"{path}: expected a 'client_id' header row")
    n_cols = len(lines[0].split("\t")) - 1
    ids, values, present = [], [], []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != n_cols + 1:
            raise ConfigurationError(f"{path}: row has {len(parts) - 1} cells, expected {n_cols}")
        ids.append(int(parts[0]))
        row = [np.nan if cell == "NA" else float(cell) for cell in parts[1:]]
        values.append(row)
        present.append([cell != "NA" for cell in parts[1:]])
    return IndicatorMatrix(np.asarray(values), np.asarray(present), ids)
