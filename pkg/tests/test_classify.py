# tests/test_classify.py
import numpy as np
import pytest
from sklearn.metrics.pairwise import additive_chi2_kernel

from app.core.exceptions import BadParams, DimensionMismatch, EmptyTrainingSet, NonConvergence, SingleClassTraining
from app.services.classify import (
    Chi2SVM,
    chi2_distance,
    chi2_distance_matrix,
    chi2_kernel,
    nn_classify,
    nn_predict,
    svm_predict,
    svm_train,
)
from tests.conftest import clustered_dataset, random_histogram


class TestChi2Distance:
    """χ² distance over dense and sparse histograms."""

    def test_examples(self):
        assert chi2_distance(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
        assert chi2_distance(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(2.0)
        assert chi2_distance(np.array([0.5, 0.5]), np.array([0.25, 0.75])) == pytest.approx(0.13333, abs=1e-5)

    def test_metric_axioms(self, rng):
        for _ in range(1000):
            x = random_histogram(rng, n_nonempty=int(rng.integers(1, 30)))
            y = random_histogram(rng, n_nonempty=int(rng.integers(1, 30)))
            d = chi2_distance(x, y)
            assert d >= 0.0
            assert d == chi2_distance(y, x)
            assert chi2_distance(x, x) == 0.0
            assert d <= 2.0 + 1e-12

    def test_matches_dense_reference(self, rng):
        hists = [random_histogram(rng, n_cells=256, n_nonempty=20) for _ in range(12)]
        dense = np.array([h.to_dense() for h in hists])
        np.testing.assert_allclose(chi2_distance_matrix(hists), -additive_chi2_kernel(dense), atol=1e-12)

    def test_sparse_and_dense_forms_agree(self, rng):
        x = random_histogram(rng, n_cells=64, n_nonempty=10)
        y = random_histogram(rng, n_cells=64, n_nonempty=10)
        assert chi2_distance(x, y) == pytest.approx(chi2_distance(x.to_dense(), y.to_dense()), abs=1e-12)
        assert chi2_distance(x.items(), y) == pytest.approx(chi2_distance(x, y), abs=1e-12)

    def test_dense_length_mismatch(self):
        with pytest.raises(DimensionMismatch):
            chi2_distance(np.ones(3) / 3, np.ones(4) / 4)

    def test_rectangular_matrix(self, rng):
        rows = [random_histogram(rng) for _ in range(3)]
        cols = [random_histogram(rng) for _ in range(5)]
        out = chi2_distance_matrix(rows, cols)
        assert out.shape == (3, 5)
        assert out[1, 2] == pytest.approx(chi2_distance(rows[1], cols[2]))


class TestChi2Kernel:

    def test_examples(self):
        x, y = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        assert chi2_kernel(x, x) == 1.0
        assert chi2_kernel(x, y, gamma=0.1) == pytest.approx(np.exp(-0.2), abs=1e-5)
        assert chi2_kernel(x, y, gamma=1000.0) < 1e-300

    def test_positive_semidefinite(self, rng):
        hists = [random_histogram(rng, n_cells=512, n_nonempty=int(rng.integers(5, 60))) for _ in range(60)]
        kernel = np.exp(-0.5 * chi2_distance_matrix(hists))
        assert np.linalg.eigvalsh(kernel).min() >= -1e-8

    def test_positive_semidefinite_over_many_draws(self, rng):
        for _ in range(1000):
            n = int(rng.integers(2, 10))
            hists = [random_histogram(rng, n_cells=64, n_nonempty=int(rng.integers(1, 20))) for _ in range(n)]
            kernel = np.exp(-float(rng.uniform(0.01, 10.0)) * chi2_distance_matrix(hists))
            assert np.linalg.eigvalsh(kernel).min() >= -1e-8

    def test_gamma_must_be_positive(self):
        with pytest.raises(BadParams):
            chi2_kernel(np.ones(2) / 2, np.ones(2) / 2, gamma=0.0)


class TestNearestNeighbour:

    def test_nearest_label(self):
        assert nn_predict(np.array([[0.5, 0.1]]), [0, 1], [0, 1]).tolist() == [1]

    def test_tie_goes_to_lowest_video_id(self):
        assert nn_predict(np.array([[0.3, 0.3, 0.9]]), [4, 2, 0], [7, 3, 1]).tolist() == [2]

    def test_duplicate_query(self):
        train = clustered_dataset(per_class=3)
        for item in train:
            assert nn_classify(train, item.histogram) == item.label

    def test_empty_training_set(self):
        with pytest.raises(EmptyTrainingSet):
            nn_predict(np.empty((1, 0)), [], [])

    def test_scaling_all_distances_keeps_predictions(self, rng):
        for _ in range(200):
            distances = rng.random((5, 12))
            distances[:, 3] = distances[:, 7]
            labels = rng.integers(0, 4, size=12)
            video_ids = rng.permutation(12)
            expected = nn_predict(distances, labels, video_ids)
            for factor in (1e-3, 0.5, 7.0, 1e4):
                np.testing.assert_array_equal(nn_predict(distances * factor, labels, video_ids), expected)


class TestSVM:
    """One-vs-one χ²-kernel SVM."""

    def test_separable_training_set(self):
        train = clustered_dataset(n_classes=3, per_class=5)
        model = svm_train(train, gamma=0.1, C=10_000.0)
        for item in train:
            assert svm_predict(model, item.histogram) == item.label

    def test_agrees_with_nn_on_duplicates(self):
        train = clustered_dataset(n_classes=4, per_class=4, seed=3)
        model = svm_train(train)
        for item in train[::3]:
            assert svm_predict(model, item.histogram) == nn_classify(train, item.histogram)

    def test_single_class(self):
        train = [d for d in clustered_dataset() if d.label_index == 0]
        with pytest.raises(SingleClassTraining):
            svm_train(train)

    def test_empty(self):
        with pytest.raises(EmptyTrainingSet):
            svm_train([])

    def test_vanishing_soft_margin_predicts_majority_class(self, rng):
        train = [random_histogram(rng, n_cells=64, n_nonempty=12) for _ in range(11)]
        labels = np.array([0] * 6 + [1] * 3 + [2] * 2)
        queries = [random_histogram(rng, n_cells=64, n_nonempty=12) for _ in range(8)]
        machine = Chi2SVM(C=1e-6).fit(np.exp(-0.1 * chi2_distance_matrix(train)), labels)
        pred = machine.predict(np.exp(-0.1 * chi2_distance_matrix(queries, train)))
        assert pred.tolist() == [0] * 8

    def test_iteration_cap(self, rng):
        x = rng.normal(size=(40, 3))
        kernel = np.exp(-0.5 * np.square(x[:, None, :] - x[None, :, :]).sum(-1))
        labels = rng.integers(0, 2, size=40)
        with pytest.raises(NonConvergence):
            Chi2SVM(C=10.0, max_iter=1).fit(kernel, labels)

    def test_vote_tie_broken_by_margin(self):
        machine = Chi2SVM()
        machine.classes_ = np.array([0, 1, 2])
        votes = np.array([[1, 1, 1]])
        margins = np.array([[-0.2, 0.7, 0.1]])
        machine.decision_votes = lambda kernel: (votes, margins)
        assert machine.predict(np.zeros((1, 3))).tolist() == [1]
