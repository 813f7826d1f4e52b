"""Linear classification on frozen descriptors and the domain protocol."""

import numpy as np
import pytest

from edgemac.classify import (
    accuracy,
    evaluate_domain_generalization,
    predict,
    train_linear,
)
from edgemac.errors import InputError, LabelError, ProtocolError, ShapeError


def unit_rows(mat):
    mat = np.asarray(mat, dtype=np.float64)
    return mat / np.linalg.norm(mat, axis=-1, keepdims=True)


def two_blob_data(rng, n_per=20, spread=0.1):
    a = unit_rows(np.array([1.0, 0.0]) + spread * rng.standard_normal((n_per, 2)))
    b = unit_rows(np.array([0.0, 1.0]) + spread * rng.standard_normal((n_per, 2)))
    x = np.concatenate([a, b])
    y = ["a"] * n_per + ["b"] * n_per
    return x, y


class TestTrainLinear:
    def test_separable_two_class_is_perfect(self, rng):
        x, y = two_blob_data(rng)
        model = train_linear(x, y, lam=1e-3)
        assert accuracy(model, x, y) == 1.0

    def test_one_hot_three_class_is_perfect(self):
        x = np.eye(3)
        y = ["u", "v", "w"]
        model = train_linear(np.tile(x, (4, 1)), y * 4, lam=1e-3)
        assert accuracy(model, x, y) == 1.0

    def test_huge_lambda_flattens_weights(self, rng):
        x, y = two_blob_data(rng)
        model = train_linear(x, y, lam=1e6)
        assert np.abs(model.weights).max() < 1e-4

    def test_single_class_rejected(self):
        with pytest.raises(LabelError):
            train_linear(np.eye(2), ["same", "same"], lam=1e-3)

    def test_nonpositive_lambda_rejected(self):
        with pytest.raises(InputError):
            train_linear(np.eye(2), ["a", "b"], lam=0.0)

    def test_objective_decreases_monotonically(self, rng):
        x, y = two_blob_data(rng)
        history = []
        train_linear(x, y, lam=1e-2, loss_history=history)
        assert len(history) > 2
        diffs = np.diff(history)
        assert np.all(diffs <= 1e-15)

    def test_deterministic_from_data_order(self, rng):
        x, y = two_blob_data(rng)
        m1 = train_linear(x, y, lam=1e-3)
        m2 = train_linear(x, y, lam=1e-3)
        np.testing.assert_array_equal(m1.weights, m2.weights)
        np.testing.assert_array_equal(m1.bias, m2.bias)


class TestPredict:
    def test_zero_weights_ties_to_first_class(self):
        from edgemac.classify import LinearModel

        model = LinearModel(weights=np.zeros((3, 2)), bias=np.zeros(3),
                            classes=("alpha", "beta", "gamma"))
        label, scores = predict(model, np.array([0.3, 0.7]))
        assert label == "alpha"
        np.testing.assert_array_equal(scores, 0.0)

    def test_two_class_dot_product_decides(self):
        from edgemac.classify import LinearModel

        model = LinearModel(weights=np.array([[1.0, 0.0], [0.0, 1.0]]),
                            bias=np.zeros(2), classes=("one", "two"))
        label, _ = predict(model, np.array([0.9, 0.1]))
        assert label == "one"
        label, _ = predict(model, np.array([0.1, 0.9]))
        assert label == "two"

    def test_argmax_invariant_to_constant_shift(self, rng):
        from edgemac.classify import LinearModel

        w = rng.standard_normal((4, 6))
        model = LinearModel(weights=w, bias=np.zeros(4), classes=("a", "b", "c", "d"))
        shifted = LinearModel(weights=w, bias=np.full(4, 13.7), classes=model.classes)
        for _ in range(20):
            d = rng.standard_normal(6)
            assert predict(model, d)[0] == predict(shifted, d)[0]

    def test_training_point_classified_to_its_class(self, rng):
        x, y = two_blob_data(rng, n_per=5)
        model = train_linear(x, y, lam=1e-3)
        assert predict(model, x[0])[0] == "a"
        assert predict(model, x[-1])[0] == "b"

    def test_dim_mismatch(self, rng):
        x, y = two_blob_data(rng, n_per=5)
        model = train_linear(x, y, lam=1e-3)
        with pytest.raises(ShapeError):
            predict(model, np.ones(5))


class TestDomainGeneralization:
    def domain_sets(self, rng, invariant=True):
        # two domains, three classes; class prototypes shared (or not)
        # across domains
        protos = unit_rows(rng.standard_normal((3, 8)))
        sets = {}
        for di, domain in enumerate(("photo", "sketch")):
            base = protos if invariant else unit_rows(rng.standard_normal((3, 8)))
            xs, ys = [], []
            for ci, cls in enumerate(("dog", "house", "guitar")):
                pts = unit_rows(base[ci] + 0.05 * rng.standard_normal((10, 8)))
                xs.append(pts)
                ys.extend([cls] * 10)
            sets[domain] = (np.concatenate(xs), ys)
        return sets

    def test_domain_invariant_features_transfer_perfectly(self, rng):
        sets = self.domain_sets(rng, invariant=True)
        acc = evaluate_domain_generalization(sets, ["photo"], "sketch", lam=1e-3)
        assert acc == 1.0

    def test_overlapping_domains_rejected(self, rng):
        sets = self.domain_sets(rng)
        with pytest.raises(ProtocolError):
            evaluate_domain_generalization(sets, ["photo", "sketch"], "sketch", lam=1e-3)

    def test_unknown_domain_rejected(self, rng):
        sets = self.domain_sets(rng)
        with pytest.raises(InputError):
            evaluate_domain_generalization(sets, ["photo"], "cartoon", lam=1e-3)

    def test_accuracy_matches_brute_force_confusion(self, rng):
        sets = self.domain_sets(rng, invariant=False)
        acc = evaluate_domain_generalization(sets, ["photo"], "sketch", lam=1e-3)
        model = train_linear(*sets["photo"], lam=1e-3)
        x, y = sets["sketch"]
        hits = 0
        for row, label in zip(x, y):
            hits += int(predict(model, row)[0] == label)
        assert acc == pytest.approx(hits / len(y), abs=1e-12)
