"""Metrics, baselines, and the ablation grids.

Evaluation is always on raw logits (the prior shift is a training-time
correction only).  `run_ablation` covers both the detection grid (indicator
variants scored by recall/precision/match-ratio over repeated mixture seeds)
and the robust-stage strategy grid (Best/Last balanced accuracy).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace

import numpy as np

from .data import ClientDataset
from .detection import (
    build_indicator_matrix,
    detection_metrics,
    fit_gmm,
    global_average_loss,
    impute_missing,
    normalize_columns,
    split_clients,
)
from .errors import UsageError
from .federation import (
    ProtocolConfig,
    RoundRecord,
    _client_rng,
    _parallel_map,
    _train_clean,
    fedavg,
    run_experiment,
    snapshot_id,
)
from .losses import LossConfig
from .models import ModelArch, ModelParams, forward, init_params


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int) -> np.ndarray:
    """C x C count matrix, rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise UsageError("true and predicted label arrays must match")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def bacc(cm: np.ndarray) -> float:
    """Mean per-class recall; classes with no test samples are excluded."""
    cm = np.asarray(cm)
    row_totals = cm.sum(axis=1)
    nonzero = row_totals > 0
    if not nonzero.any():
        raise UsageError("confusion matrix has no populated rows")
    recalls = np.diag(cm)[nonzero] / row_totals[nonzero]
    return float(recalls.mean())


def evaluate(params: ModelParams, test_x: np.ndarray, test_y: np.ndarray) -> tuple[np.ndarray, float]:
    """Argmax of raw logits (first index wins ties) -> (confusion matrix, balanced accuracy)."""
    preds = np.argmax(forward(params, test_x), axis=1)
    cm = confusion_matrix(test_y, preds, params.arch.num_classes)
    return cm, bacc(cm)


def best_and_last(records: list[RoundRecord], window: int = 10) -> tuple[float, float]:
    """Best = max per-round balanced accuracy; Last = mean over the final `window` rounds."""
    scores = [r.bacc for r in records if r.bacc is not None]
    if not scores:
        raise UsageError("records carry no evaluation scores")
    return float(max(scores)), float(np.mean(scores[-window:]))


def run_baseline(
    name: str,
    clients: list[ClientDataset],
    proto: ProtocolConfig,
    test: tuple[np.ndarray, np.ndarray] | None = None,
    arch: ModelArch | None = None,
    threads: int = 1,
) -> tuple[ModelParams, list[RoundRecord]]:
    """Single-stage reference runs: `fedavg` (plain CE) or `fedavg_la` (logit-adjusted CE)."""
    if name not in ("fedavg", "fedavg_la"):
        raise UsageError(f"unknown baseline '{name}'; expected fedavg or fedavg_la")
    if arch is None:
        arch = ModelArch(input_dim=clients[0].features.shape[1], num_classes=clients[0].class_count)
    proto = replace(proto, loss_cfg=replace(proto.loss_cfg, la_enabled=(name == "fedavg_la")))
    global_params = init_params(arch, np.random.default_rng(np.random.SeedSequence((proto.seed, 0xA11))))
    records = []
    for rnd in range(1, proto.total_rounds + 1):
        def update(client: ClientDataset):
            return _train_clean(global_params, client, proto, _client_rng(proto.seed, rnd, client.client_id))

        results = _parallel_map(update, clients, threads)
        trained = [(cl.client_id, p, cl.size) for cl, (p, _) in zip(clients, results) if cl.size > 0]
        global_params = fedavg([(p, n) for _, p, n in trained])
        total = float(sum(n for _, _, n in trained))
        bacc_val = evaluate(global_params, test[0], test[1])[1] if test is not None else None
        records.append(
            RoundRecord(
                round_index=rnd,
                stage=name,
                snapshot_id=snapshot_id(global_params),
                client_losses={cl.client_id: loss for cl, (_, loss) in zip(clients, results)},
                agg_weights={cid: n / total for cid, _, n in trained},
                bacc=bacc_val,
            )
        )
    return global_params, records


@dataclass(frozen=True)
class AblationSpec:
    """One grid cell: detection-indicator toggles plus robust-stage strategy toggles."""

    la: bool = True
    per_class: bool = True
    norm: bool = True
    kd: bool = True
    daagg: bool = True
    exclude_noisy: bool = False
    train: bool = True  # False: score detection only, skip the training stages
    repetitions: int = 100

    def label(self) -> str:
        flags = [
            "la" if self.la else "-",
            "pc" if self.per_class else "-",
            "nm" if self.norm else "-",
        ]
        if self.exclude_noisy:
            flags.append("excl")
        else:
            flags.extend(["kd" if self.kd else "-", "da" if self.daagg else "-"])
        return "+".join(flags)


# Detection grid mirrors the indicator comparisons: global average loss with and
# without the prior shift, then per-class variants up to the full pipeline.
STAGE1_GRID = (
    AblationSpec(la=False, per_class=False, norm=False, train=False),
    AblationSpec(la=True, per_class=False, norm=False, train=False),
    AblationSpec(la=False, per_class=True, norm=False, train=False),
    AblationSpec(la=True, per_class=True, norm=False, train=False),
    AblationSpec(la=True, per_class=True, norm=True, train=False),
)

# Strategy grid: no mitigation, drop detected noisy clients, each mitigation
# alone, both together.
STAGE2_GRID = (
    AblationSpec(kd=False, daagg=False),
    AblationSpec(exclude_noisy=True),
    AblationSpec(kd=False, daagg=True),
    AblationSpec(kd=True, daagg=False),
    AblationSpec(kd=True, daagg=True),
)


def warmup_model(
    clients: list[ClientDataset],
    proto: ProtocolConfig,
    arch: ModelArch | None = None,
    la: bool = True,
    rounds: int | None = None,
    threads: int = 1,
) -> list[ModelParams]:
    """FedAvg warm-up returning the global model after each round (1-indexed list)."""
    if arch is None:
        arch = ModelArch(input_dim=clients[0].features.shape[1], num_classes=clients[0].class_count)
    proto = replace(proto, loss_cfg=replace(proto.loss_cfg, la_enabled=la))
    rounds = rounds if rounds is not None else proto.warmup_rounds
    global_params = init_params(arch, np.random.default_rng(np.random.SeedSequence((proto.seed, 0xA11))))
    snapshots = []
    for rnd in range(1, rounds + 1):
        def update(client: ClientDataset):
            return _train_clean(global_params, client, proto, _client_rng(proto.seed, rnd, client.client_id))

        results = _parallel_map(update, clients, threads)
        trained = [(p, cl.size) for cl, (p, _) in zip(clients, results) if cl.size > 0]
        global_params = fedavg(trained)
        snapshots.append(global_params)
    return snapshots


def score_detection(
    warm_params: ModelParams,
    clients: list[ClientDataset],
    per_class: bool,
    norm: bool,
    repetitions: int,
    base_seed: int,
) -> tuple[float, float, float]:
    """Mean recall/precision and exact-match ratio over repeated mixture fits."""
    if per_class:
        matrix = impute_missing(build_indicator_matrix(warm_params, clients))
        if norm:
            matrix = normalize_columns(matrix)
    else:
        matrix = global_average_loss(warm_params, clients)
    truth = {cl.client_id: cl.is_noisy_truth for cl in clients}
    recalls, precisions, matches = [], [], []
    for rep in range(repetitions):
        seed = int(np.random.SeedSequence((base_seed, 0x9301, rep)).generate_state(1)[0])
        result = split_clients(matrix, fit_gmm(matrix, seed=seed))
        re, pr, match = detection_metrics(result, truth)
        recalls.append(re)
        precisions.append(pr)
        matches.append(match)
    return float(np.mean(recalls)), float(np.mean(precisions)), float(np.mean(matches))


def run_ablation(
    cells: list[AblationSpec] | tuple[AblationSpec, ...],
    clients: list[ClientDataset],
    proto: ProtocolConfig,
    test: tuple[np.ndarray, np.ndarray] | None = None,
    arch: ModelArch | None = None,
    threads: int = 1,
) -> list[dict]:
    """Execute grid cells and return one result row per cell.

    Warm-up models are shared between cells with the same prior-shift setting;
    detection scores always come from the cell's own indicator variant.
    """
    warm_cache: dict[bool, ModelParams] = {}
    rows = []
    for cell in cells:
        start = time.perf_counter()
        if cell.la not in warm_cache:
            warm_cache[cell.la] = warmup_model(clients, proto, arch, la=cell.la, threads=threads)[-1]
        re, pr, mr = score_detection(
            warm_cache[cell.la], clients, cell.per_class, cell.norm, cell.repetitions, proto.seed
        )
        best = last = None
        if cell.train:
            if test is None:
                raise UsageError("training cells require a test set")
            _, _, records = run_experiment(
                clients,
                proto,
                test=test,
                arch=arch,
                use_kd=cell.kd,
                use_daagg=cell.daagg,
                exclude_noisy=cell.exclude_noisy,
                threads=threads,
            )
            best, last = best_and_last(records)
        rows.append(
            {
                "label": cell.label(),
                "la": cell.la,
                "per_class": cell.per_class,
                "norm": cell.norm,
                "kd": cell.kd,
                "daagg": cell.daagg,
                "exclude_noisy": cell.exclude_noisy,
                "best": best,
                "last": last,
                "recall": re,
                "precision": pr,
                "match_ratio": mr,
                "wall_time_s": time.perf_counter() - start,
            }
        )
    return rows


def run_t1_sweep(
    clients: list[ClientDataset],
    proto: ProtocolConfig,
    t1_values: list[int],
    repetitions: int = 100,
    arch: ModelArch | None = None,
    threads: int = 1,
) -> list[dict]:
    """Detection quality as a function of the warm-up length, along one warm-up trajectory."""
    snapshots = warmup_model(clients, proto, arch, la=True, rounds=max(t1_values), threads=threads)
    rows = []
    for t1 in t1_values:
        re, pr, mr = score_detection(snapshots[t1 - 1], clients, True, True, repetitions, proto.seed)
        rows.append({"t1": t1, "recall": re, "precision": pr, "match_ratio": mr})
    return rows


def write_result_csv(rows: list[dict], path) -> None:
    """One row per configuration; None cells are left empty."""
    if not rows:
        raise UsageError("no rows to write")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
