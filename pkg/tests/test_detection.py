import numpy as np
import pytest

from noisefed.data import PartitionConfig, generate_global, partition
from noisefed.detection import (
    DetectionResult,
    GmmModel,
    IndicatorMatrix,
    build_indicator_matrix,
    detection_metrics,
    fit_gmm,
    global_average_loss,
    impute_missing,
    load_indicator_matrix,
    normalize_columns,
    per_class_losses,
    save_indicator_matrix,
    split_clients,
)
from noisefed.errors import ConfigurationError, UsageError
from noisefed.losses import log_softmax
from noisefed.models import ModelArch, forward, init_params, zero_params

from conftest import random_params


def matrix_of(values, present=None, ids=None):
    values = np.asarray(values, dtype=float)
    present = np.ones(values.shape, dtype=bool) if present is None else np.asarray(present)
    ids = list(range(values.shape[0])) if ids is None else ids
    return IndicatorMatrix(values, present, ids)


class TestPerClassLosses:
    def test_zero_params_give_log_c(self):
        data = generate_global(4, [4, 4, 4, 4], 3, 1.0, seed=0)
        clients = partition(data, PartitionConfig(client_count=1, bernoulli_p=1.0, seed=0))
        values, mask = per_class_losses(zero_params(ModelArch(3, 4)), clients[0])
        assert mask.all()
        assert np.allclose(values, np.log(4), atol=1e-12)

    def test_absent_class_masked(self, rng):
        data = generate_global(3, [40, 30, 20], 3, 1.0, seed=1)
        clients = partition(data, PartitionConfig(client_count=1, bernoulli_p=1.0, seed=0))
        client = clients[0]
        keep = client.observed_labels != 1  # drop class 1 entirely
        client.features = client.features[keep]
        client.observed_labels = client.observed_labels[keep]
        client.clean_labels = client.clean_labels[keep]
        client.flipped = client.flipped[keep]
        values, mask = per_class_losses(init_params(ModelArch(3, 3), rng), client)
        assert list(mask) == [True, False, True]
        assert np.isnan(values[1])

    def test_matches_per_sample_loop_oracle(self, rng):
        data = generate_global(3, [30, 20, 10], 4, 1.0, seed=2)
        clients = partition(data, PartitionConfig(client_count=2, seed=3))
        arch = ModelArch(4, 3)
        params = random_params(arch, rng)
        for client in clients:
            values, mask = per_class_losses(params, client)
            for c in range(3):
                rows = [j for j in range(client.size) if client.observed_labels[j] == c]
                if not rows:
                    assert not mask[c]
                    continue
                losses = []
                for j in rows:
                    logp = log_softmax(forward(params, client.features[j]))
                    losses.append(-logp[client.observed_labels[j]])
                assert abs(values[c] - np.mean(losses)) < 1e-10


class TestImpute:
    def test_minimum_fill(self):
        m = matrix_of([[0.3], [0.0], [0.9]], present=[[True], [False], [True]])
        out = impute_missing(m)
        assert list(out.values[:, 0]) == [0.3, 0.3, 0.9]
        assert out.present.all()

    def test_noop_when_fully_present(self):
        m = matrix_of([[0.1, 0.2], [0.3, 0.4]])
        out = impute_missing(m)
        assert np.array_equal(out.values, m.values)

    def test_single_donor_column(self):
        m = matrix_of([[0.0], [0.7], [0.0]], present=[[False], [True], [False]])
        out = impute_missing(m)
        assert list(out.values[:, 0]) == [0.7, 0.7, 0.7]

    def test_never_changes_present_cells(self, rng):
        values = rng.random((6, 4))
        present = rng.random((6, 4)) > 0.3
        present[0] = True  # every column needs a donor
        m = matrix_of(values.copy(), present)
        out = impute_missing(m)
        assert np.array_equal(out.values[present], values[present])

    def test_fully_absent_class_rejected(self):
        m = matrix_of([[0.1, 0.0], [0.2, 0.0]], present=[[True, False], [True, False]])
        with pytest.raises(ConfigurationError):
            impute_missing(m)


class TestNormalize:
    def test_endpoints_and_midpoint(self):
        out = normalize_columns(matrix_of([[0.2], [0.5], [0.8]]))
        assert np.allclose(out.values[:, 0], [0.0, 0.5, 1.0], atol=1e-12)

    def test_constant_column_maps_to_zero(self):
        out = normalize_columns(matrix_of([[0.4], [0.4]]))
        assert np.array_equal(out.values[:, 0], [0.0, 0.0])

    def test_idempotent_on_spanning_columns(self):
        m = matrix_of([[0.0, 1.0], [1.0, 0.0], [0.25, 0.75]])
        out = normalize_columns(m)
        assert np.allclose(out.values, m.values, atol=1e-12)

    def test_range_and_rank_preserved(self, rng):
        m = matrix_of(rng.random((10, 5)) * 40 - 3)
        out = normalize_columns(m)
        assert out.values.min() >= 0.0 and out.values.max() <= 1.0
        for c in range(5):
            assert np.array_equal(np.argsort(m.values[:, c]), np.argsort(out.values[:, c]))

    def test_requires_imputed(self):
        m = matrix_of([[0.1], [0.2]], present=[[True], [False]])
        with pytest.raises(UsageError):
            normalize_columns(m)


def two_cluster_matrix(rng, n_low=10, n_high=8, dim=3, gap=1.0, scale=0.02):
    low = rng.normal(size=(n_low, dim)) * scale
    high = gap + rng.normal(size=(n_high, dim)) * scale
    return matrix_of(np.vstack([low, high])), n_low


class TestFitGmm:
    def test_separated_clusters_recovered(self, rng):
        m = matrix_of([[0.0, 0.0], [0.1, 0.1], [0.9, 0.9], [1.0, 1.0]])
        model = fit_gmm(m, seed=0)
        means = model.means[np.argsort(model.means[:, 0])]
        assert np.allclose(means[0], [0.05, 0.05], atol=0.02)
        assert np.allclose(means[1], [0.95, 0.95], atol=0.02)
        from noisefed.detection import _responsibilities

        resp = _responsibilities(model, m.values)
        assert np.all(resp.max(axis=1) > 0.99)

    def test_identical_rows_survive_via_variance_floor(self):
        m = matrix_of(np.ones((5, 3)) * 0.4)
        model = fit_gmm(m, seed=1)
        assert np.all(model.variances >= 1e-6)
        assert np.all(np.isfinite(model.means))

    def test_log_likelihood_nondecreasing(self, rng):
        for rep in range(50):
            m = matrix_of(rng.random((12, 4)))
            model = fit_gmm(m, seed=rep)
            trace = np.asarray(model.log_likelihoods)
            assert np.all(np.diff(trace) >= -1e-9)

    def test_needs_two_rows(self):
        with pytest.raises(UsageError):
            fit_gmm(matrix_of([[0.5]]), seed=0)

    def test_mixture_weights_valid(self, rng):
        m, _ = two_cluster_matrix(rng)
        model = fit_gmm(m, seed=3)
        assert np.all(model.weights > 0) and np.all(model.weights < 1)
        assert abs(model.weights.sum() - 1.0) < 1e-12


class TestSplitClients:
    def test_low_norm_component_is_clean(self, rng):
        m, n_low = two_cluster_matrix(rng)
        result = split_clients(m, fit_gmm(m, seed=5))
        assert result.clean_ids == set(range(n_low))
        assert result.noisy_ids == set(range(n_low, n_low + 8))

    def test_tied_responsibilities_go_clean(self):
        m = matrix_of([[0.5, 0.5], [0.5, 0.5]])
        model = GmmModel(
            means=np.asarray([[0.5, 0.5], [0.5, 0.5]]),
            variances=np.full((2, 2), 0.01),
            weights=np.asarray([0.5, 0.5]),
            log_likelihoods=[0.0],
        )
        result = split_clients(m, model)
        assert result.noisy_ids == set()
        assert result.clean_ids == {0, 1}
        assert all(p == 0.5 for p in result.noisy_posterior.values())

    def test_single_outlier_detected_by_density(self, rng):
        rows = np.vstack([rng.normal(size=(9, 4)) * 0.02, np.ones((1, 4))])
        m = matrix_of(rows)
        model = fit_gmm(m, seed=2)
        result = split_clients(m, model)
        assert result.noisy_ids == {9}
        # direct Gaussian density evaluation oracle for the outlier row
        def diag_logpdf(x, mean, var):
            return float(-0.5 * np.sum(np.log(2 * np.pi * var) + (x - mean) ** 2 / var))

        comp = [diag_logpdf(rows[9], model.means[k], model.variances[k]) + np.log(model.weights[k]) for k in (0, 1)]
        noisy_comp = int(np.argmax([np.linalg.norm(model.means[k]) for k in (0, 1)]))
        assert comp[noisy_comp] > comp[1 - noisy_comp]

    def test_invariant_to_component_relabeling(self, rng):
        m, _ = two_cluster_matrix(rng)
        model = fit_gmm(m, seed=11)
        swapped = GmmModel(
            means=model.means[::-1].copy(),
            variances=model.variances[::-1].copy(),
            weights=model.weights[::-1].copy(),
            log_likelihoods=list(model.log_likelihoods),
        )
        a = split_clients(m, model)
        b = split_clients(m, swapped)
        assert a.clean_ids == b.clean_ids and a.noisy_ids == b.noisy_ids


class TestDetectionMetrics:
    def test_perfect_detection(self):
        result = DetectionResult(clean_ids={0, 1}, noisy_ids={2, 3}, noisy_posterior={})
        truth = {0: False, 1: False, 2: True, 3: True}
        assert detection_metrics(result, truth) == (1.0, 1.0, True)

    def test_all_flagged_half_noisy(self):
        result = DetectionResult(clean_ids=set(), noisy_ids={0, 1, 2, 3}, noisy_posterior={})
        truth = {0: True, 1: True, 2: False, 3: False}
        re, pr, match = detection_metrics(result, truth)
        assert (re, pr, match) == (1.0, 0.5, False)

    def test_seven_of_eight_hit(self):
        noisy_truth = set(range(8))
        result = DetectionResult(
            clean_ids=set(range(7, 20)), noisy_ids=set(range(7)), noisy_posterior={}
        )
        truth = {cid: cid in noisy_truth for cid in range(20)}
        re, pr, match = detection_metrics(result, truth)
        assert re == pytest.approx(0.875) and pr == 1.0 and match is False

    def test_empty_noisy_set_conventions(self):
        result = DetectionResult(clean_ids={0, 1}, noisy_ids=set(), noisy_posterior={})
        assert detection_metrics(result, {0: False, 1: False})[:2] == (1.0, 1.0)
        assert detection_metrics(result, {0: True, 1: False})[:2] == (0.0, 0.0)

    def test_universe_mismatch_rejected(self):
        result = DetectionResult(clean_ids={0}, noisy_ids={1}, noisy_posterior={})
        with pytest.raises(UsageError):
            detection_metrics(result, {0: False})


class TestMatrixIO:
    def test_round_trip_with_missing_cells(self, tmp_path, rng):
        values = rng.random((5, 3))
        present = rng.random((5, 3)) > 0.4
        present[2] = True
        m = matrix_of(values, present, ids=[3, 1, 4, 0, 2])
        path = tmp_path / "matrix.tsv"
        save_indicator_matrix(m, path)
        back = load_indicator_matrix(path)
        assert back.client_ids == m.client_ids
        assert np.array_equal(back.present, m.present)
        assert np.array_equal(back.values[m.present], m.values[m.present])
        # file-level round trip is byte-identical
        again = tmp_path / "matrix2.tsv"
        save_indicator_matrix(back, again)
        assert path.read_bytes() == again.read_bytes()

    def test_malformed_header_rejected(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("nope\n1\t2\n")
        with pytest.raises(ConfigurationError):
            load_indicator_matrix(path)


def test_indicator_matrix_from_clients(rng):
    data = generate_global(3, [60, 40, 20], 4, 1.0, seed=6)
    clients = partition(data, PartitionConfig(client_count=4, seed=7))
    params = init_params(ModelArch(4, 3), rng)
    matrix = build_indicator_matrix(params, clients)
    assert matrix.values.shape == (4, 3)
    assert matrix.client_ids == [0, 1, 2, 3]
    ga = global_average_loss(params, clients)
    assert ga.values.shape == (4, 1)
    # the global indicator is the sample-weighted mean of the per-class entries
    for row, cl in enumerate(clients):
        counts = np.bincount(cl.observed_labels, minlength=3)
        expected = np.nansum(matrix.values[row] * counts) / cl.size
        assert abs(ga.values[row, 0] - expected) < 1e-10
