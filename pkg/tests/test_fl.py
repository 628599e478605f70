"""Training substrate oracles: gradients, aggregation, evaluation, stopping."""

import math

import numpy as np
import pytest

from fedshield.errors import InvalidInputError, NumericalDivergenceError
from fedshield.fl import (
    Dataset,
    aggregate,
    converged,
    dataset_from_csv_bytes,
    dataset_to_csv_bytes,
    deserialize_params,
    evaluate,
    gradient,
    local_train,
    logistic_loss,
    make_update,
    params_hash,
    serialize_params,
    sigmoid,
    synthetic_dataset,
)
from fedshield.policy import SessionConfig


def cfg(**overrides):
    base = dict(learning_rate=0.1, local_epochs=1, batch_size=32)
    base.update(overrides)
    return SessionConfig(**base)


def scalar_loss_oracle(params, features, labels):
    """Independent per-example reimplementation of the logistic loss."""
    total = 0.0
    for x, y in zip(features, labels):
        z = sum(float(w) * float(v) for w, v in zip(params[:-1], x)) + float(params[-1])
        p = 1.0 / (1.0 + math.exp(-z))
        total += -(y * math.log(p) + (1.0 - y) * math.log(1.0 - p))
    return total / len(labels)


def finite_difference_gradient(params, features, labels, h=1e-6):
    grad = np.zeros_like(params)
    for i in range(params.size):
        hi, lo = params.copy(), params.copy()
        hi[i] += h
        lo[i] -= h
        grad[i] = (logistic_loss(hi, features, labels)
                   - logistic_loss(lo, features, labels)) / (2 * h)
    return grad


class TestGradient:
    def test_zero_learning_rate_keeps_params(self):
        data = synthetic_dataset(50, 4, seed=1)
        start = np.arange(5, dtype=np.float64) / 10
        update = local_train(start, data, cfg(learning_rate=0.0), seed=0)
        assert np.array_equal(update.params, start)

    def test_single_example_moves_only_bias(self):
        # x = 0, y = 1, start = 0: gradient is (0, sigma(0) - 1) = (0, -0.5),
        # so one full-batch step moves the bias by exactly 0.5 * lr
        data = Dataset(np.zeros((1, 3)), np.ones(1))
        lr = 0.2
        update = local_train(np.zeros(4), data,
                             cfg(learning_rate=lr, batch_size=1), seed=0)
        expected = np.array([0.0, 0.0, 0.0, 0.5 * lr])
        assert np.allclose(update.params, expected, atol=0, rtol=0)

    def test_matches_central_finite_differences(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            n, d = rng.integers(3, 20), rng.integers(1, 6)
            features = rng.standard_normal((n, d))
            labels = rng.integers(0, 2, n).astype(np.float64)
            params = rng.standard_normal(d + 1)
            analytic = gradient(params, features, labels)
            numeric = finite_difference_gradient(params, features, labels)
            rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), 1e-12)
            assert rel <= 1e-5

    def test_divergence_raises(self):
        data = Dataset(np.full((4, 2), 1e200), np.ones(4))
        with pytest.raises(NumericalDivergenceError):
            local_train(np.zeros(3), data, cfg(learning_rate=1e250, batch_size=4,
                                               local_epochs=3), seed=0)

    def test_sigmoid_stable_at_extremes(self):
        z = np.array([-1e6, -50.0, 0.0, 50.0, 1e6])
        out = sigmoid(z)
        assert np.all(np.isfinite(out))
        assert out[0] == 0.0 and out[-1] == 1.0 and out[2] == 0.5


class TestAggregate:
    def test_single_update_identity(self):
        params = np.array([1.0, -2.0, 3.0])
        agg = aggregate([make_update("a", 1, params, 17)])
        assert np.array_equal(agg, params)

    def test_symmetric_updates_cancel(self):
        u = np.array([0.5, -1.5, 2.5])
        agg = aggregate([make_update("a", 1, u, 10), make_update("b", 1, -u, 10)])
        assert np.array_equal(agg, np.zeros(3))

    def test_weighted_mean_brute_force_oracle(self):
        rng = np.random.default_rng(13)
        vectors = [rng.standard_normal(8) for _ in range(3)]
        counts = [1, 2, 3]
        updates = [make_update(f"c{i}", 2, v, n)
                   for i, (v, n) in enumerate(zip(vectors, counts))]
        agg = aggregate(updates)
        expected = np.zeros(8)
        for v, n in zip(vectors, counts):  # independent scalar accumulation
            for j in range(8):
                expected[j] += n * v[j]
        expected /= sum(counts)
        assert np.max(np.abs(agg - expected) / np.maximum(np.abs(expected), 1e-300)) <= 1e-12

    def test_permutation_bit_identical(self):
        rng = np.random.default_rng(5)
        updates = [make_update(f"c{i}", 1, rng.standard_normal(6), int(n))
                   for i, n in enumerate(rng.integers(1, 100, size=7))]
        reference = aggregate(updates)
        for _ in range(10):
            rng.shuffle(updates)
            assert np.array_equal(aggregate(updates), reference)

    def test_identical_updates_regardless_of_weights(self):
        params = np.array([0.25, -0.5])
        updates = [make_update(f"c{i}", 1, params, n)
                   for i, n in enumerate([1, 999, 40])]
        assert np.array_equal(aggregate(updates), params)

    def test_empty_and_mismatched_inputs(self):
        with pytest.raises(InvalidInputError):
            aggregate([])
        with pytest.raises(InvalidInputError):
            aggregate([make_update("a", 1, np.zeros(3), 1),
                       make_update("b", 1, np.zeros(4), 1)])
        with pytest.raises(InvalidInputError):
            aggregate([make_update("a", 1, np.zeros(3), 1),
                       make_update("b", 2, np.zeros(3), 1)])


class TestEvaluate:
    def test_zero_params_predict_class_one(self):
        data = synthetic_dataset(101, 3, seed=9)
        accuracy, loss = evaluate(np.zeros(4), data)
        assert accuracy == pytest.approx(float(np.mean(data.labels == 1.0)))
        assert loss == pytest.approx(math.log(2), rel=1e-12)

    def test_separated_fixture_reaches_accuracy_one(self):
        features = np.array([[-2.0], [-1.5], [1.5], [2.0]])
        labels = np.array([0.0, 0.0, 1.0, 1.0])
        accuracy, _ = evaluate(np.array([10.0, 0.0]), Dataset(features, labels))
        assert accuracy == 1.0

    def test_loss_matches_scalar_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(10):
            n, d = 30, 5
            features = rng.standard_normal((n, d))
            labels = rng.integers(0, 2, n).astype(np.float64)
            params = rng.standard_normal(d + 1) * 0.5
            _, loss = evaluate(params, Dataset(features, labels))
            oracle = scalar_loss_oracle(params, features, labels)
            assert abs(loss - oracle) / abs(oracle) <= 1e-12

    def test_empty_dataset_rejected(self):
        with pytest.raises(InvalidInputError):
            Dataset(np.zeros((0, 2)), np.zeros(0))


class TestConverged:
    def test_target_accuracy_reached(self):
        assert converged([(1, 0.97, 0.3)], cfg(target_accuracy=0.95))

    def test_loss_plateau(self):
        history = [(1, 0.5, 0.50), (2, 0.5, 0.4999), (3, 0.5, 0.4998),
                   (4, 0.5, 0.4998)]
        assert converged(history, cfg(target_accuracy=0.99,
                                      convergence_epsilon=1e-3, patience=3))

    def test_not_converged_early(self):
        history = [(1, 0.5, 0.7), (2, 0.55, 0.6)]
        assert not converged(history, cfg(target_accuracy=0.99, patience=3,
                                          max_rounds=10))

    def test_max_rounds(self):
        history = [(r, 0.5, 0.7 - 0.01 * r) for r in range(1, 11)]
        assert converged(history, cfg(target_accuracy=0.99, patience=3,
                                      max_rounds=10))


class TestDeterminism:
    def test_bit_identical_update_hashes(self):
        data = synthetic_dataset(80, 6, seed=3)
        start = np.zeros(7)
        first = local_train(start, data, cfg(local_epochs=3), seed=42)
        second = local_train(start, data, cfg(local_epochs=3), seed=42)
        assert first.params_hash == second.params_hash
        assert np.array_equal(first.params, second.params)
        different_seed = local_train(start, data, cfg(local_epochs=3), seed=43)
        assert different_seed.params_hash != first.params_hash

    def test_loss_non_increasing_on_separable_fixture(self):
        rng = np.random.default_rng(17)
        n, d = 60, 3
        features = rng.standard_normal((n, d))
        labels = (features[:, 0] > 0).astype(np.float64)
        features[:, 0] += np.where(labels == 1.0, 0.5, -0.5)  # margin
        data = Dataset(features, labels)
        params = np.zeros(d + 1)
        losses = [logistic_loss(params, features, labels)]
        training = cfg(learning_rate=0.1, batch_size=n, local_epochs=1)
        for _ in range(50):
            params = local_train(params, data, training, seed=0).params
            losses.append(logistic_loss(params, features, labels))
        deltas = np.diff(losses)
        assert np.all(deltas <= 0)


class TestSerialization:
    def test_params_round_trip(self):
        vec = np.array([1.5, -2.25, 1e-300, 3e200, 0.0])
        assert np.array_equal(deserialize_params(serialize_params(vec)), vec)

    def test_params_hash_is_serialization_hash(self):
        import hashlib
        vec = np.array([0.1, 0.2])
        assert params_hash(vec) == hashlib.sha256(serialize_params(vec)).digest()

    def test_bad_lengths(self):
        with pytest.raises(InvalidInputError):
            deserialize_params(b"\x00\x00\x00\x02" + b"\x00" * 8)

    def test_csv_round_trip(self):
        data = synthetic_dataset(25, 4, seed=11)
        blob = dataset_to_csv_bytes(data)
        parsed = dataset_from_csv_bytes(blob)
        assert np.array_equal(parsed.features, data.features)
        assert np.array_equal(parsed.labels, data.labels)
        # identical content gives identical bytes (dataset identity)
        assert dataset_to_csv_bytes(parsed) == blob

    def test_csv_rejects_bad_labels(self):
        blob = b"x0,y\n1.0,2\n"
        with pytest.raises(InvalidInputError):
            dataset_from_csv_bytes(blob)

    def test_csv_rejects_ragged_rows(self):
        blob = b"x0,x1,y\n1.0,2.0,1\n3.0,0\n"
        with pytest.raises(InvalidInputError):
            dataset_from_csv_bytes(blob)
