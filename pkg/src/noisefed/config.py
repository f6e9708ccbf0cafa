"""Sectioned key-value experiment configuration.

An empty file yields the default profile (20 clients, Dirichlet alpha 2.0,
Bernoulli 0.9 ownership, 10 warm-up rounds out of 100, 5 local epochs, noise
rate 0.4 with eta in (0.3, 0.5)); every key is range-checked at parse time and
unknown keys are rejected outright.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

import numpy as np

from .data import GlobalDataset, PartitionConfig, generate_global, long_tailed_counts, partition
from .errors import ConfigParseError
from .federation import ProtocolConfig
from .losses import LossConfig
from .models import ModelArch
from .noise import NoiseConfig, generate_noise

OUTPUT_DIR_ENV = "NOISEFED_OUT_DIR"


@dataclass(frozen=True)
class DataConfig:
    class_count: int = 5
    largest_class: int = 2000
    imbalance_ratio: float = 10.0
    feature_dim: int = 8
    blob_spread: float = 1.0
    mean_scale: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    model: str = "linear"
    hidden_dim: int = 16
    seed: int = 0
    out: str = "results.jsonl"


def _subseed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence((seed, tag)).generate_state(1)[0])


# section -> key -> (python type, validator or None).  Validators raise nothing
# themselves; they return an error string when the value is out of range.
_SCHEMA = {
    "data": {
        "class_count": (int, lambda v, a: None if v >= 2 else "must be >= 2"),
        "largest_class": (int, lambda v, a: None if v >= 1 else "must be >= 1"),
        "imbalance_ratio": (float, lambda v, a: None if v >= 1.0 else "must be >= 1"),
        "feature_dim": (int, lambda v, a: None if v >= 1 else "must be >= 1"),
        "blob_spread": (float, lambda v, a: None if v > 0 else "must be > 0"),
        "mean_scale": (float, lambda v, a: None if v > 0 else "must be > 0"),
    },
    "partition": {
        "client_count": (int, lambda v, a: None if v >= 2 else "must be >= 2"),
        "dirichlet_alpha": (float, lambda v, a: None if v > 0 else "must be > 0"),
        "bernoulli_p": (float, lambda v, a: None if 0 < v <= 1 else "must be in (0, 1]"),
    },
    "noise": {
        "rate": (float, lambda v, a: None if 0 <= v < 1 else "must be in [0, 1)"),
        "eta_low": (float, lambda v, a: None if 0 <= v < 1 else "must be in [0, 1)"),
        "eta_high": (float, lambda v, a: None if 0 <= v < 1 else "must be in [0, 1)"),
        "annotator_epochs": (int, lambda v, a: None if v >= 1 else "must be >= 1"),
    },
    "protocol": {
        "total_rounds": (int, lambda v, a: None if v >= 2 else "must be >= 2"),
        "warmup_rounds": (int, lambda v, a: None if v >= 1 else "must be >= 1"),
        "local_epochs": (int, lambda v, a: None if v >= 1 else "must be >= 1"),
        "temperature": (float, lambda v, a: None if v > 0 else "must be > 0"),
        "lambda_max": (float, lambda v, a: None if 0 <= v <= 1 else "must be in [0, 1]"),
        "ramp_length": (int, lambda v, a: None if v >= 1 else "must be >= 1"),
        "model": (str, lambda v, a: None if v in ("linear", "mlp") else "must be 'linear' or 'mlp'"),
        "hidden_dim": (int, lambda v, a: None if v >= 1 else "must be >= 1"),
    },
    "optimizer": {
        "lr": (float, lambda v, a: None if v > 0 else "must be > 0"),
        "beta1": (float, lambda v, a: None if 0 <= v < 1 else "must be in [0, 1)"),
        "beta2": (float, lambda v, a: None if 0 <= v < 1 else "must be in [0, 1)"),
        "weight_decay": (float, lambda v, a: None if v >= 0 else "must be >= 0"),
        "batch_size": (int, lambda v, a: None if v >= 1 else "must be >= 1"),
    },
    "run": {
        "seed": (int, lambda v, a: None),
        "out": (str, lambda v, a: None),
    },
}


def _coerce(section: str, key: str, raw: str):
    typ, check = _SCHEMA[section][key]
    try:
        value = typ(raw) if typ is not bool else raw.lower() in ("1", "true", "yes")
    except ValueError:
        raise ConfigParseError("syntax", f"{section}.{key}: cannot parse {raw!r} as {typ.__name__}")
    msg = check(value, None)
    if msg is not None:
        raise ConfigParseError("range", f"{section}.{key} = {value}: {msg}")
    return value


def parse_config(path: str | os.PathLike) -> ExperimentConfig:
    """Parse and fully validate a config file; omitted keys take the defaults."""
    if not os.path.exists(path):
        raise ConfigParseError("missing-file", f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (configparser.Error, UnicodeDecodeError) as exc:
        raise ConfigParseError("syntax", f"{path}: {exc}") from exc

    values: dict[str, dict[str, object]] = {s: {} for s in _SCHEMA}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigParseError("unknown-key", f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigParseError("unknown-key", f"unknown key '{key}' in section [{section}]")
            values[section][key] = _coerce(section, key, raw)

    noise = values["noise"]
    low = noise.get("eta_low", NoiseConfig.eta_low)
    high = noise.get("eta_high", NoiseConfig.eta_high)
    if low > high:
        raise ConfigParseError("range", f"noise.eta_low ({low}) must be <= noise.eta_high ({high})")

    proto_raw = values["protocol"]
    total = proto_raw.get("total_rounds", ProtocolConfig.total_rounds)
    warmup = proto_raw.get("warmup_rounds", ProtocolConfig.warmup_rounds)
    if not warmup < total:
        raise ConfigParseError(
            "range", f"protocol.warmup_rounds ({warmup}) must be < protocol.total_rounds ({total})"
        )

    seed = values["run"].get("seed", 0)
    opt = values["optimizer"]
    loss_cfg = LossConfig(
        temperature=proto_raw.get("temperature", 0.8),
        lambda_max=proto_raw.get("lambda_max", 0.8),
        ramp_length=proto_raw.get("ramp_length"),
        la_enabled=True,
    )
    return ExperimentConfig(
        data=DataConfig(**{k: v for k, v in values["data"].items()}),
        partition=PartitionConfig(
            client_count=values["partition"].get("client_count", 20),
            dirichlet_alpha=values["partition"].get("dirichlet_alpha", 2.0),
            bernoulli_p=values["partition"].get("bernoulli_p", 0.9),
            seed=_subseed(seed, 2),
        ),
        noise=NoiseConfig(
            global_rate=noise.get("rate", 0.4),
            eta_low=low,
            eta_high=high,
            annotator_epochs=noise.get("annotator_epochs", 5),
            seed=_subseed(seed, 3),
        ),
        protocol=ProtocolConfig(
            total_rounds=total,
            warmup_rounds=warmup,
            local_epochs=proto_raw.get("local_epochs", 5),
            loss_cfg=loss_cfg,
            seed=seed,
            lr=opt.get("lr", 3e-4),
            beta1=opt.get("beta1", 0.9),
            beta2=opt.get("beta2", 0.999),
            weight_decay=opt.get("weight_decay", 5e-4),
            batch_size=opt.get("batch_size", 16),
        ),
        model=proto_raw.get("model", "linear"),
        hidden_dim=proto_raw.get("hidden_dim", 16),
        seed=seed,
        out=values["run"].get("out", "results.jsonl"),
    )


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


def experiment_arch(cfg: ExperimentConfig) -> ModelArch:
    return ModelArch(
        input_dim=cfg.data.feature_dim,
        num_classes=cfg.data.class_count,
        hidden_dim=cfg.hidden_dim if cfg.model == "mlp" else None,
    )


def build_dataset(cfg: ExperimentConfig) -> GlobalDataset:
    counts = long_tailed_counts(cfg.data.class_count, cfg.data.largest_class, cfg.data.imbalance_ratio)
    return generate_global(
        cfg.data.class_count,
        counts,
        cfg.data.feature_dim,
        cfg.data.blob_spread,
        seed=_subseed(cfg.seed, 1),
        mean_scale=cfg.data.mean_scale,
    )


def build_experiment(cfg: ExperimentConfig):
    """Materialise one experiment: (noisy clients, test split, protocol, architecture)."""
    data = build_dataset(cfg)
    clients = partition(data, cfg.partition)
    arch = experiment_arch(cfg)
    clients = generate_noise(clients, cfg.noise, arch)
    return clients, (data.test_x, data.test_y), cfg.protocol, arch


def resolve_output(path: str) -> str:
    """Relative outputs land in $NOISEFED_OUT_DIR when it is set."""
    base = os.environ.get(OUTPUT_DIR_ENV)
    if base and not os.path.isabs(path):
        return os.path.join(base, path)
    return path
