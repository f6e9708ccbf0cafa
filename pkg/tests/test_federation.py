import numpy as np
import pytest

from noisefed.data import ClientDataset, PartitionConfig, generate_global, partition
from noisefed.detection import DetectionResult
from noisefed.errors import ConfigurationError, UsageError
from noisefed.federation import (
    ProtocolConfig,
    daagg,
    fedavg,
    local_train_clean,
    local_train_noisy,
    run_experiment,
)
from noisefed.losses import LossConfig, ce_loss, kd_loss, tempered_softmax
from noisefed.models import ModelArch, ModelParams, forward, init_params
from noisefed.noise import NoiseConfig, generate_noise

ARCH1 = ModelArch(input_dim=1, num_classes=2)  # 4 parameters; used as a scalar-ish carrier


def scalar_params(v: float) -> ModelParams:
    return ModelParams(np.asarray([float(v), 0.0, 0.0, 0.0]), ARCH1)


def make_clients(n_clients=4, seed=0, counts=(240, 120), dim=3, mean_scale=2.5):
    data = generate_global(len(counts), list(counts), dim, 1.0, seed=seed, mean_scale=mean_scale)
    clients = partition(data, PartitionConfig(client_count=n_clients, seed=seed + 1))
    return clients, (data.test_x, data.test_y)


class TestFedavg:
    def test_symmetric_mean_is_zero(self, rng):
        p = init_params(ModelArch(3, 2), rng)
        neg = ModelParams(-p.values, p.arch)
        merged = fedavg([(p, 10), (neg, 10)])
        assert np.max(np.abs(merged.values)) < 1e-15

    def test_single_client_identity(self, rng):
        p = init_params(ModelArch(3, 2), rng)
        merged = fedavg([(p, 7)])
        assert np.allclose(merged.values, p.values, atol=1e-15)

    def test_weighted_mean_by_hand(self):
        merged = fedavg([(scalar_params(0.0), 1), (scalar_params(4.0), 3)])
        assert merged.values[0] == pytest.approx(3.0, abs=1e-12)

    def test_scale_equivariance(self, rng):
        models = [(init_params(ModelArch(4, 3), rng), int(n)) for n in (3, 5, 9)]
        base = fedavg(models)
        scaled = fedavg([(ModelParams(2.5 * p.values, p.arch), n) for p, n in models])
        assert np.max(np.abs(scaled.values - 2.5 * base.values)) < 1e-12

    def test_arch_mismatch_rejected(self, rng):
        a = init_params(ModelArch(3, 2), rng)
        b = init_params(ModelArch(4, 2), rng)
        with pytest.raises(ConfigurationError):
            fedavg([(a, 1), (b, 1)])


class TestDaagg:
    def test_hand_computed_weights(self):
        locals_ = [(0, scalar_params(0.0), 10), (1, scalar_params(1.0), 10), (2, scalar_params(2.0), 10)]
        merged, weights = daagg(locals_, clean_set={0})
        assert weights[0] == pytest.approx(0.5064, abs=1e-4)
        assert weights[1] == pytest.approx(0.3071, abs=1e-4)
        assert weights[2] == pytest.approx(0.1863, abs=1e-4)
        assert merged.values[0] == pytest.approx(0.6798, abs=1e-4)

    def test_all_clean_equals_fedavg(self, rng):
        arch = ModelArch(5, 3)
        locals_ = [(i, init_params(arch, np.random.default_rng(i)), 3 + i) for i in range(4)]
        merged, weights = daagg(locals_, clean_set={0, 1, 2, 3})
        plain = fedavg([(p, n) for _, p, n in locals_])
        assert np.max(np.abs(merged.values - plain.values)) < 1e-12
        assert abs(sum(weights.values()) - 1.0) < 1e-12

    def test_coincident_noisy_model_keeps_fedavg_weight(self):
        clean = scalar_params(1.5)
        twin = scalar_params(1.5)
        far = scalar_params(9.0)
        _, weights = daagg([(0, clean, 10), (1, twin, 10), (2, far, 10)], clean_set={0})
        assert weights[1] == pytest.approx(weights[0], abs=1e-12)
        assert weights[2] < weights[1]

    def test_weight_nonincreasing_in_distance(self):
        base = [(0, scalar_params(0.0), 10), (1, scalar_params(1.0), 10)]
        _, w_near = daagg(base + [(2, scalar_params(0.5), 10)], clean_set={0})
        _, w_far = daagg(base + [(2, scalar_params(3.0), 10)], clean_set={0})
        assert w_far[2] < w_near[2]

    def test_empty_clean_set_falls_back_to_fedavg(self, caplog):
        locals_ = [(0, scalar_params(1.0), 5), (1, scalar_params(3.0), 15)]
        with caplog.at_level("WARNING"):
            merged, weights = daagg(locals_, clean_set=set())
        plain = fedavg([(scalar_params(1.0), 5), (scalar_params(3.0), 15)])
        assert np.array_equal(merged.values, plain.values)
        assert weights == {0: 0.25, 1: 0.75}
        assert any("clean set" in r.message for r in caplog.records)

    def test_weights_sum_to_one(self, rng):
        arch = ModelArch(4, 2)
        locals_ = [(i, init_params(arch, np.random.default_rng(100 + i)), 2 + 3 * i) for i in range(6)]
        _, weights = daagg(locals_, clean_set={1, 4})
        assert abs(sum(weights.values()) - 1.0) < 1e-12


class TestLocalTraining:
    def _one_client(self, seed=3):
        clients, _ = make_clients(1, seed=seed)
        return clients[0]

    def test_zero_epochs_returns_global_unchanged(self, rng):
        client = self._one_client()
        proto = ProtocolConfig(local_epochs=0)
        start = init_params(ModelArch(3, 2), rng)
        out = local_train_clean(start, client, proto, np.random.default_rng(0))
        assert np.array_equal(out.values, start.values)
        assert out is not start

    def test_training_loss_decreases_on_separable_data(self, rng):
        client = self._one_client()
        proto = ProtocolConfig(local_epochs=1)
        params = init_params(ModelArch(3, 2), np.random.default_rng(5))
        stream = np.random.default_rng(11)
        losses = [ce_loss(params, client.features, client.observed_labels, client.prior, True)[0]]
        for _ in range(4):  # consecutive 1-epoch calls share the rng stream
            params = local_train_clean(params, client, proto, stream)
            losses.append(ce_loss(params, client.features, client.observed_labels, client.prior, True)[0])
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_deterministic_under_seed(self):
        client = self._one_client()
        proto = ProtocolConfig(local_epochs=2)
        start = init_params(ModelArch(3, 2), np.random.default_rng(1))
        a = local_train_clean(start, client, proto, np.random.default_rng(42))
        b = local_train_clean(start, client, proto, np.random.default_rng(42))
        assert np.array_equal(a.values, b.values)

    def test_empty_client_skipped_with_warning(self, rng, caplog):
        empty = ClientDataset(
            client_id=0,
            features=np.zeros((0, 3)),
            observed_labels=np.zeros(0, dtype=np.int64),
            clean_labels=np.zeros(0, dtype=np.int64),
            flipped=np.zeros(0, dtype=bool),
            class_count=2,
        )
        start = init_params(ModelArch(3, 2), rng)
        with caplog.at_level("WARNING"):
            out = local_train_clean(start, empty, ProtocolConfig(), np.random.default_rng(0))
        assert np.array_equal(out.values, start.values)
        assert any("no samples" in r.message for r in caplog.records)

    def test_kd_lambda_zero_matches_clean_training(self):
        client = self._one_client()
        proto = ProtocolConfig(local_epochs=2)
        start = init_params(ModelArch(3, 2), np.random.default_rng(2))
        clean = local_train_clean(start, client, proto, np.random.default_rng(9))
        noisy = local_train_noisy(start, client, 0.0, proto, np.random.default_rng(9))
        assert np.array_equal(clean.values, noisy.values)

    def test_kd_lambda_one_moves_student_toward_teacher(self):
        client = self._one_client()
        teacher = init_params(ModelArch(3, 2), np.random.default_rng(21))
        teacher_logits = forward(teacher, client.features)
        cfg = LossConfig(temperature=0.8)
        proto = ProtocolConfig(local_epochs=1, loss_cfg=cfg)

        def mean_kl(student):
            q = tempered_softmax(teacher_logits, cfg.temperature)
            logq = np.log(q)
            logp = np.log(tempered_softmax(forward(student, client.features), 1.0))
            return float((q * (logq - logp)).sum(axis=1).mean())

        student = init_params(ModelArch(3, 2), np.random.default_rng(33))
        stream = np.random.default_rng(4)
        kls = [mean_kl(student)]
        for _ in range(4):
            student = local_train_noisy(student, client, 1.0, proto, stream, teacher=teacher)
            kls.append(mean_kl(student))
        assert all(b < a for a, b in zip(kls, kls[1:]))


class TestRunExperiment:
    def _setup(self, n_clients=4, noisy=True, seed=5):
        clients, test = make_clients(n_clients, seed=seed)
        if noisy:
            clients = generate_noise(clients, NoiseConfig(global_rate=0.5, seed=seed + 10))
        return clients, test

    def _proto(self, **over):
        defaults = dict(total_rounds=6, warmup_rounds=2, local_epochs=1, seed=3)
        defaults.update(over)
        return ProtocolConfig(**defaults)

    def test_round_records_and_stages(self):
        clients, test = self._setup()
        proto = self._proto()
        params, detection, records = run_experiment(clients, proto, test)
        assert len(records) == 6
        assert [r.stage for r in records] == ["warmup"] * 2 + ["robust"] * 4
        assert all(abs(sum(r.agg_weights.values()) - 1.0) < 1e-12 for r in records)
        assert all(r.bacc is not None for r in records)
        assert detection.clean_ids | detection.noisy_ids == {cl.client_id for cl in clients}

    def test_boundary_single_robust_round(self):
        clients, test = self._setup()
        proto = self._proto(total_rounds=3, warmup_rounds=2)
        _, _, records = run_experiment(clients, proto, test)
        assert [r.stage for r in records] == ["warmup", "warmup", "robust"]

    def test_bit_reproducible_across_thread_counts(self):
        clients, test = self._setup()
        proto = self._proto()
        runs = [run_experiment(clients, proto, test, threads=t) for t in (1, 4, 1)]
        snapshots = [[r.snapshot_id for r in records] for _, _, records in runs]
        assert snapshots[0] == snapshots[1] == snapshots[2]
        assert np.array_equal(runs[0][0].values, runs[1][0].values)
        jsons = [[r.to_json() for r in records] for _, _, records in runs]
        assert jsons[0] == jsons[1]

    def test_forced_empty_noisy_set_equals_pure_fedavg_la(self):
        clients, test = self._setup(noisy=False)
        proto = self._proto()
        override = DetectionResult(
            clean_ids={cl.client_id for cl in clients}, noisy_ids=set(), noisy_posterior={}
        )
        params, _, records = run_experiment(clients, proto, test, detection_override=override)

        from noisefed.evaluation import run_baseline

        base_params, base_records = run_baseline("fedavg_la", clients, proto, test)
        assert np.array_equal(params.values, base_params.values)
        assert [r.snapshot_id for r in records] == [r.snapshot_id for r in base_records]

    def test_partial_participation_rejected(self):
        clients, test = self._setup()
        with pytest.raises(ConfigurationError):
            run_experiment(clients, self._proto(clients_per_round=2), test)

    def test_invalid_round_budget_rejected(self):
        with pytest.raises(ConfigurationError):
            ProtocolConfig(total_rounds=5, warmup_rounds=5)
        with pytest.raises(ConfigurationError):
            ProtocolConfig(total_rounds=5, warmup_rounds=0)
