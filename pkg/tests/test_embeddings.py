"""Embedding pretraining: pairwise matrices, softmax rows, loss and gradient."""

import numpy as np
import pytest

from esmakit.embeddings import (
    DivergenceError,
    EmbeddingBank,
    class_mean_features,
    manifold_loss_gradient,
    manifold_matching_loss,
    mean_pairwise_cosine,
    pairwise_matrices,
    pretrain_embeddings,
    row_softmax,
)


class TestClassMeanFeatures:
    def test_single_sample_class(self, blob_model):
        from esmakit.data import LabeledDataset
        from esmakit.models import predict_logits

        dataset = LabeledDataset(np.array([[-2.0, 0.1], [2.0, -0.1]]), np.array([0, 1]))
        means = class_mean_features(blob_model, dataset)
        logits = predict_logits(blob_model, dataset.features)
        np.testing.assert_allclose(means[0], logits[0], rtol=1e-12)

    def test_two_sample_mean(self, blob_model):
        from esmakit.data import LabeledDataset
        from esmakit.models import predict_logits

        dataset = LabeledDataset(
            np.array([[-2.0, 0.1], [-1.5, -0.4], [2.0, 0.0]]), np.array([0, 0, 1])
        )
        means = class_mean_features(blob_model, dataset)
        logits = predict_logits(blob_model, dataset.features)
        np.testing.assert_allclose(means[0], (logits[0] + logits[1]) / 2, rtol=1e-12)

    def test_thirty_sample_brute_force(self, blob_model, blob_dataset):
        from esmakit.models import predict_logits

        means = class_mean_features(blob_model, blob_dataset)
        logits = predict_logits(blob_model, blob_dataset.features)
        for k in (0, 1):
            idx = blob_dataset.class_indices(k)
            expected = np.zeros(2)
            for i in idx:
                expected += logits[i]
            expected /= len(idx)
            np.testing.assert_allclose(means[k], expected, rtol=1e-12)

    def test_empty_class_raises(self, blob_model):
        from esmakit.data import LabeledDataset

        dataset = LabeledDataset(np.array([[0.0, 0.0]]), np.array([0]), n_classes=2)
        with pytest.raises(ValueError):
            class_mean_features(blob_model, dataset)


class TestPairwiseMatrices:
    def test_identical_vectors(self):
        m = pairwise_matrices(np.array([[1.0, 2.0], [1.0, 2.0], [0.0, 1.0]]))
        assert m.euclidean[0, 1] == 0.0
        assert m.cosine[0, 1] == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal_unit_vectors(self):
        m = pairwise_matrices(np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert m.euclidean[0, 1] == pytest.approx(np.sqrt(2.0), rel=1e-15)
        assert m.cosine[0, 1] == pytest.approx(0.0, abs=1e-15)

    def test_matches_naive_double_loop(self):
        rng = np.random.default_rng(8)
        vectors = rng.normal(size=(5, 4))
        m = pairwise_matrices(vectors)
        for i in range(5):
            for j in range(5):
                dist = np.sqrt(sum((vectors[i][c] - vectors[j][c]) ** 2 for c in range(4)))
                assert m.euclidean[i, j] == pytest.approx(dist, abs=1e-12)
                if i != j:
                    cos = sum(vectors[i][c] * vectors[j][c] for c in range(4))
                    cos /= np.linalg.norm(vectors[i]) * np.linalg.norm(vectors[j])
                    assert m.cosine[i, j] == pytest.approx(cos, abs=1e-12)

    def test_bit_exact_symmetry(self):
        rng = np.random.default_rng(13)
        m = pairwise_matrices(rng.normal(size=(7, 3)))
        assert np.array_equal(m.euclidean, m.euclidean.T)
        assert np.array_equal(m.cosine, m.cosine.T)
        assert np.all(np.diag(m.euclidean) == 0.0)
        assert np.all(np.diag(m.cosine) == 1.0)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError, match="zero vector"):
            pairwise_matrices(np.array([[0.0, 0.0], [1.0, 0.0]]))


class TestRowSoftmax:
    def test_constant_row_uniform(self):
        out = row_softmax(np.full((3, 4), 2.0))
        np.testing.assert_allclose(out, 0.25, rtol=1e-15)

    def test_closed_form_two_entry_row(self):
        out = row_softmax(np.array([[0.0, np.log(3.0)]]))
        np.testing.assert_allclose(out, [[0.25, 0.75]], rtol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        out = row_softmax(rng.normal(scale=50.0, size=(20, 6)))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
        assert (out > 0).all()


def _random_bank(rng, k=4, width=4):
    return EmbeddingBank(
        embeddings=rng.normal(size=(k, width)),
        class_means=rng.normal(size=(k, width)),
        lambda1=1.0,
        lambda2=1e-3,
    )


class TestManifoldMatchingLoss:
    def test_perfect_match_leaves_only_norm_term(self):
        rng = np.random.default_rng(4)
        means = rng.normal(size=(5, 3))
        bank = EmbeddingBank(embeddings=means.copy(), class_means=means, lambda2=1e-3)
        expected = 1e-3 * np.linalg.norm(means, axis=1).sum()
        assert manifold_matching_loss(bank) == pytest.approx(expected, rel=1e-9)

    def test_lower_bound(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            bank = _random_bank(rng)
            floor = bank.lambda2 * np.linalg.norm(bank.embeddings, axis=1).sum()
            assert manifold_matching_loss(bank) >= floor - 1e-12

    def test_gradient_matches_finite_differences(self):
        """Relative error < 1e-4 in 64-bit at 5 random banks with K=4."""
        rng = np.random.default_rng(6)
        eps = 1e-6
        for _ in range(5):
            bank = _random_bank(rng)
            grad = manifold_loss_gradient(bank)
            fd = np.zeros_like(grad)
            for i in range(grad.shape[0]):
                for j in range(grad.shape[1]):
                    for sign in (1.0, -1.0):
                        emb = bank.embeddings.copy()
                        emb[i, j] += sign * eps
                        shifted = EmbeddingBank(
                            embeddings=emb, class_means=bank.class_means,
                            lambda1=bank.lambda1, lambda2=bank.lambda2,
                        )
                        fd[i, j] += sign * manifold_matching_loss(shifted)
                    fd[i, j] /= 2 * eps
            rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-8)
            assert rel.max() < 1e-4

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(7)
        bank = _random_bank(rng, k=3, width=3)
        perm = np.array([2, 0, 1])
        permuted = EmbeddingBank(
            embeddings=bank.embeddings[perm], class_means=bank.class_means[perm],
            lambda1=bank.lambda1, lambda2=bank.lambda2,
        )
        assert manifold_matching_loss(permuted) == pytest.approx(
            manifold_matching_loss(bank), rel=1e-12
        )


class TestPretrainEmbeddings:
    def test_zero_steps_unchanged(self):
        rng = np.random.default_rng(8)
        bank = _random_bank(rng)
        trained, trajectory = pretrain_embeddings(bank, steps=0)
        np.testing.assert_array_equal(trained.embeddings, bank.embeddings)
        assert trajectory == []

    def test_loss_non_increasing_small_steps(self):
        rng = np.random.default_rng(9)
        bank = _random_bank(rng)
        _, trajectory = pretrain_embeddings(bank, step_size=1e-3, steps=100)
        diffs = np.diff(trajectory)
        assert (diffs <= 1e-8).all()

    def test_declustering_on_k10(self, blob_model, blob_dataset):
        rng = np.random.default_rng(10)
        k, width = 10, 6
        # clustered init: small perturbations of one direction
        base = rng.normal(size=width)
        embeddings = base[None, :] + 0.05 * rng.normal(size=(k, width))
        means = rng.normal(size=(k, width)) * 2.0
        bank = EmbeddingBank(embeddings=embeddings, class_means=means)
        before = mean_pairwise_cosine(bank.embeddings)
        trained, _ = pretrain_embeddings(bank, step_size=0.05, steps=400)
        after = mean_pairwise_cosine(trained.embeddings)
        assert after < before

    def test_divergence_aborts(self):
        rng = np.random.default_rng(11)
        bank = _random_bank(rng)
        with pytest.raises((DivergenceError, OverflowError)):
            pretrain_embeddings(bank, step_size=1e9, steps=50)

    def test_save_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(12)
        bank = _random_bank(rng)
        bank.save(tmp_path / "bank.json")
        loaded = EmbeddingBank.load(tmp_path / "bank.json")
        np.testing.assert_array_equal(loaded.embeddings, bank.embeddings)
        np.testing.assert_array_equal(loaded.class_means, bank.class_means)
        assert loaded.lambda1 == bank.lambda1 and loaded.lambda2 == bank.lambda2
