"""Two-stage federated training loop.

Stage 1 warms up a global model with size-weighted averaging while every
client trains on logit-adjusted cross-entropy.  At the hand-off round the
server detects noisy clients from per-class losses; afterwards clean clients
keep the cross-entropy objective while noisy clients distill from the frozen
round-start global model, and aggregation becomes distance-aware.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import ClientDataset
from .detection import (
    DetectionResult,
    build_indicator_matrix,
    fit_gmm,
    impute_missing,
    normalize_columns,
    split_clients,
)
from .errors import ConfigurationError, UsageError
from .losses import LossConfig, ce_loss, kd_loss, rampup_lambda
from .models import ModelArch, ModelParams, forward, init_params
from .optim import OptimizerState, minibatch_train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProtocolConfig:
    total_rounds: int = 100
    warmup_rounds: int = 10
    local_epochs: int = 5
    clients_per_round: int | None = None  # None = all clients, the only supported mode
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-4
    batch_size: int = 16

    def __post_init__(self) -> None:
        if not 1 <= self.warmup_rounds < self.total_rounds:
            raise ConfigurationError(
                f"need 1 <= warmup_rounds < total_rounds, got {self.warmup_rounds}/{self.total_rounds}"
            )
        if self.local_epochs < 0:
            raise ConfigurationError(f"local_epochs must be >= 0, got {self.local_epochs}")

    def optimizer_state(self, param_count: int) -> OptimizerState:
        return OptimizerState.fresh(
            param_count,
            beta1=self.beta1,
            beta2=self.beta2,
            lr=self.lr,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
        )


@dataclass
class RoundRecord:
    round_index: int
    stage: str
    snapshot_id: str
    client_losses: dict[int, float]
    agg_weights: dict[int, float]
    bacc: float | None = None

    def __post_init__(self) -> None:
        if self.agg_weights and abs(sum(self.agg_weights.values()) - 1.0) > 1e-12:
            raise ConfigurationError("aggregation weights must sum to 1")

    def to_json(self) -> str:
        payload = {
            "round": self.round_index,
            "stage": self.stage,
            "snapshot": self.snapshot_id,
            "client_losses": {str(k): v for k, v in self.client_losses.items()},
            "agg_weights": {str(k): v for k, v in self.agg_weights.items()},
            "bacc": self.bacc,
        }
        return json.dumps(payload, sort_keys=True)


def snapshot_id(params: ModelParams) -> str:
    return hashlib.sha256(params.values.tobytes()).hexdigest()[:12]


def _client_rng(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    # one stream per (round, client): results do not depend on scheduling
    return np.random.default_rng(np.random.SeedSequence((seed, round_index, client_id)))


def local_train_clean(
    global_params: ModelParams,
    client: ClientDataset,
    proto: ProtocolConfig,
    rng: np.random.Generator | None = None,
) -> ModelParams:
    """Local epochs of minibatch Adam on (logit-adjusted) cross-entropy."""
    rng = rng if rng is not None else np.random.default_rng(proto.seed)
    params, _ = _train_clean(global_params, client, proto, rng)
    return params


def _train_clean(global_params, client, proto, rng):
    if client.size == 0:
        log.warning("client %d has no samples; skipping local training", client.client_id)
        return global_params.copy(), float("nan")

    def step(p, xb, yb):
        return ce_loss(p, xb, yb, client.prior, la_enabled=proto.loss_cfg.la_enabled)

    state = proto.optimizer_state(global_params.arch.param_count)
    return minibatch_train(global_params, client.features, client.observed_labels, step, state, proto.local_epochs, rng)


def local_train_noisy(
    global_params: ModelParams,
    client: ClientDataset,
    lam: float,
    proto: ProtocolConfig,
    rng: np.random.Generator | None = None,
    teacher: ModelParams | None = None,
) -> ModelParams:
    """Local epochs on the distillation mixture against the frozen round-start teacher."""
    rng = rng if rng is not None else np.random.default_rng(proto.seed)
    params, _ = _train_noisy(global_params, client, lam, proto, rng, teacher)
    return params


def _train_noisy(global_params, client, lam, proto, rng, teacher=None):
    if client.size == 0:
        log.warning("client %d has no samples; skipping local training", client.client_id)
        return global_params.copy(), float("nan")
    teacher_logits = forward(teacher if teacher is not None else global_params, client.features)
    cfg = proto.loss_cfg
    indices = np.arange(client.size)

    def step(p, xb, ib):
        return kd_loss(
            p,
            xb,
            client.observed_labels[ib],
            teacher_logits[ib],
            lam,
            cfg.temperature,
            client.prior,
            la_enabled=cfg.la_enabled,
        )

    state = proto.optimizer_state(global_params.arch.param_count)
    return minibatch_train(global_params, client.features, indices, step, state, proto.local_epochs, rng)


def fedavg(local_models: list[tuple[ModelParams, int]]) -> ModelParams:
    """Size-weighted element-wise average of local models."""
    if not local_models:
        raise UsageError("fedavg needs at least one local model")
    arch = local_models[0][0].arch
    if any(p.arch != arch for p, _ in local_models):
        raise ConfigurationError("all local models must share one architecture")
    if any(n <= 0 for _, n in local_models):
        raise UsageError("client sizes must be positive")
    total = float(sum(n for _, n in local_models))
    stacked = np.stack([p.values for p, _ in local_models])
    weights = np.asarray([n / total for _, n in local_models])
    return ModelParams(weights @ stacked, arch)


def daagg(
    local_models: list[tuple[int, ModelParams, int]],
    clean_set: set[int],
) -> tuple[ModelParams, dict[int, float]]:
    """Distance-aware aggregation: FedAvg weights scaled by exp(-normalised distance).

    A client's distance is the L2 gap to the nearest clean client's parameters
    (zero for clean clients), normalised by the maximum over clients.  With an
    empty clean set this degenerates to plain FedAvg, with a warning.
    """
    if not local_models:
        raise UsageError("daagg needs at least one local model")
    ids = [cid for cid, _, _ in local_models]
    if not clean_set:
        log.warning("empty clean set: distance-aware aggregation falls back to FedAvg")
        merged = fedavg([(p, n) for _, p, n in local_models])
        total = float(sum(n for _, _, n in local_models))
        return merged, {cid: n / total for cid, _, n in local_models}

    vectors = {cid: p.values for cid, p, _ in local_models}
    clean_stack = np.stack([vectors[cid] for cid in ids if cid in clean_set])
    dist = np.zeros(len(ids))
    for row, (cid, p, _) in enumerate(local_models):
        if cid in clean_set:
            continue
        dist[row] = np.min(np.linalg.norm(clean_stack - p.values, axis=1))
    max_d = dist.max()
    norm_d = dist / max_d if max_d > 0 else dist
    raw = np.asarray([n for _, _, n in local_models], dtype=np.float64) * np.exp(-norm_d)
    weights = raw / raw.sum()
    stacked = np.stack([p.values for _, p, _ in local_models])
    merged = ModelParams(weights @ stacked, local_models[0][1].arch)
    return merged, {cid: float(w) for cid, w in zip(ids, weights)}


def detect_noisy_clients(
    global_params: ModelParams,
    clients: list[ClientDataset],
    gmm_seed: int,
) -> DetectionResult:
    """Stage-1 hand-off: indicator matrix -> impute -> normalise -> GMM -> split."""
    matrix = normalize_columns(impute_missing(build_indicator_matrix(global_params, clients)))
    return split_clients(matrix, fit_gmm(matrix, seed=gmm_seed))


def _parallel_map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def run_experiment(
    clients: list[ClientDataset],
    proto: ProtocolConfig,
    test: tuple[np.ndarray, np.ndarray] | None = None,
    arch: ModelArch | None = None,
    detection_override: DetectionResult | None = None,
    use_kd: bool = True,
    use_daagg: bool = True,
    exclude_noisy: bool = False,
    threads: int = 1,
) -> tuple[ModelParams, DetectionResult, list[RoundRecord]]:
    """Run the full two-stage protocol over the given clients.

    `detection_override` replaces the GMM hand-off (test hook / oracle runs).
    `use_kd`, `use_daagg` and `exclude_noisy` select the robust-stage strategy;
    defaults give the full protocol.  Per-round evaluation happens when `test`
    is provided.
    """
    from .evaluation import evaluate  # local import to avoid a module cycle

    if proto.clients_per_round is not None and proto.clients_per_round != len(clients):
        raise ConfigurationError("partial client participation is not supported; all clients train each round")
    if not clients:
        raise UsageError("need at least one client")
    if arch is None:
        arch = ModelArch(input_dim=clients[0].features.shape[1], num_classes=clients[0].class_count)

    seq = np.random.SeedSequence((proto.seed, 0xA11))
    global_params = init_params(arch, np.random.default_rng(seq))
    gmm_seed = int(np.random.SeedSequence((proto.seed, 0x633)).generate_state(1)[0])
    loss_cfg = proto.loss_cfg.resolved(proto.total_rounds - proto.warmup_rounds)
    proto = replace(proto, loss_cfg=loss_cfg)

    detection: DetectionResult | None = detection_override
    records: list[RoundRecord] = []

    for rnd in range(1, proto.total_rounds + 1):
        warmup = rnd <= proto.warmup_rounds
        if warmup or detection is None:
            active = clients
        elif exclude_noisy:
            active = [cl for cl in clients if cl.client_id in detection.clean_ids]
        else:
            active = clients

        lam = None
        if not warmup and use_kd:
            lam = rampup_lambda(rnd - proto.warmup_rounds, loss_cfg)

        def update(client: ClientDataset):
            rng = _client_rng(proto.seed, rnd, client.client_id)
            if warmup or detection is None or client.client_id in detection.clean_ids or not use_kd:
                return _train_clean(global_params, client, proto, rng)
            return _train_noisy(global_params, client, lam, proto, rng)

        results = _parallel_map(update, active, threads)
        losses = {cl.client_id: loss for cl, (_, loss) in zip(active, results)}
        trained = [(cl.client_id, params, cl.size) for cl, (params, _) in zip(active, results) if cl.size > 0]
        if not trained:
            raise UsageError("no client contributed an update this round")

        if warmup or not use_daagg or detection is None:
            global_params = fedavg([(p, n) for _, p, n in trained])
            total = float(sum(n for _, _, n in trained))
            weights = {cid: n / total for cid, _, n in trained}
        else:
            global_params, weights = daagg(trained, detection.clean_ids)

        if rnd == proto.warmup_rounds and detection is None:
            detection = detect_noisy_clients(global_params, clients, gmm_seed)

        bacc_val = None
        if test is not None:
            _, bacc_val = evaluate(global_params, test[0], test[1])
        records.append(
            RoundRecord(
                round_index=rnd,
                stage="warmup" if warmup else "robust",
                snapshot_id=snapshot_id(global_params),
                client_losses=losses,
                agg_weights=weights,
                bacc=bacc_val,
            )
        )

    assert detection is not None
    return global_params, detection, records
