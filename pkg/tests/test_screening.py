"""Easy-sample screening: stats oracles, threshold semantics, anchor invariants."""

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from esmakit.data import LabeledDataset
from esmakit.screening import (
    AnchorSet,
    InsufficientSamplesError,
    SampleStats,
    per_sample_stats,
    screen_anchors,
    select_easy_anchors,
)


class TinyLinear(nn.Module):
    """2-feature linear probe whose gradients are easy to reason about."""

    def __init__(self, weight, bias):
        super().__init__()
        self.linear = nn.Linear(2, 2)
        with torch.no_grad():
            self.linear.weight.copy_(torch.tensor(weight, dtype=torch.float32))
            self.linear.bias.copy_(torch.tensor(bias, dtype=torch.float32))

    def forward(self, x):
        return self.linear(x.flatten(1))


class TestPerSampleStats:
    def test_perfect_confidence_limit(self):
        """Saturating logit margin drives loss and input gradient to ~0."""
        model = TinyLinear([[50.0, 0.0], [-50.0, 0.0]], [0.0, 0.0])
        dataset = LabeledDataset(np.array([[5.0, 0.0]]), np.array([0]))
        (stat,) = per_sample_stats(model, dataset)
        assert stat.loss == pytest.approx(0.0, abs=1e-12)
        assert stat.grad_norm == pytest.approx(0.0, abs=1e-12)

    def test_gradient_matches_finite_differences(self, blob_model, blob_dataset):
        """Central differences in 64-bit agree within relative 1e-3."""
        import copy

        model = copy.deepcopy(blob_model).double()
        stats = per_sample_stats(model, blob_dataset)
        eps = 1e-6
        for idx in (0, 13, 47, 79):
            x0 = blob_dataset.features[idx]
            label = int(blob_dataset.labels[idx])
            grad_fd = np.zeros(2)
            for j in range(2):
                for sign in (1.0, -1.0):
                    x = x0.copy()
                    x[j] += sign * eps
                    logits = model(torch.from_numpy(x[None]).double())
                    loss = float(F.cross_entropy(logits, torch.tensor([label])).detach())
                    grad_fd[j] += sign * loss
                grad_fd[j] /= 2 * eps
            expected = float(np.linalg.norm(grad_fd))
            if expected > 1e-10:
                assert stats[idx].grad_norm == pytest.approx(expected, rel=1e-3)

    def test_duplicated_sample_identical_stats(self, blob_model):
        point = np.array([[0.5, -1.0], [0.5, -1.0]])
        dataset = LabeledDataset(point, np.array([1, 1]))
        s0, s1 = per_sample_stats(blob_model, dataset)
        assert s0.loss == s1.loss
        assert s0.grad_norm == s1.grad_norm

    def test_index_order(self, blob_model, blob_dataset):
        stats = per_sample_stats(blob_model, blob_dataset, batch_size=17)
        assert [s.sample_index for s in stats] == list(range(len(blob_dataset)))


def _stats_from_arrays(losses, grads):
    return [
        SampleStats(sample_index=i, loss=float(l), grad_norm=float(g))
        for i, (l, g) in enumerate(zip(losses, grads))
    ]


class TestSelectEasyAnchors:
    def test_q1_single_sample_per_class(self, blob_model):
        features = np.array([[-2.0, 0.0], [2.0, 0.0]])
        dataset = LabeledDataset(features, np.array([0, 1]))
        anchors = screen_anchors(blob_model, dataset, q=1)
        assert anchors.members[0].tolist() == [0]
        assert anchors.members[1].tolist() == [1]
        logits = blob_model(torch.from_numpy(features).float()).detach().double().numpy()
        np.testing.assert_allclose(anchors.anchors[0], logits[0], rtol=1e-9)

    def test_hand_enumerated_intersection(self, tiny_desk_model, tiny_desk):
        """4-sample class, loss rank s1<s2<s3<s4, grad rank s2<s1<s4<s3, q=2 -> {s1, s2}."""
        losses = np.array([0.1, 0.2, 0.3, 0.4])
        grads = np.array([0.2, 0.1, 0.4, 0.3])
        dataset = LabeledDataset(np.zeros((4, 2)), np.zeros(4, dtype=int))

        class Probe(nn.Module):
            def forward(self, x):
                return torch.zeros(x.shape[0], 1)

        anchors = select_easy_anchors(_stats_from_arrays(losses, grads), dataset, Probe(), q=2)
        assert anchors.members[0].tolist() == [0, 1]

    def test_default_q2_on_toy(self, blob_model, blob_dataset):
        anchors = screen_anchors(blob_model, blob_dataset, q=2)
        for k in (0, 1):
            assert 1 <= len(anchors.members[k]) <= 2

    def test_thresholds_hold_for_every_member(self, blob_model, blob_dataset):
        stats = per_sample_stats(blob_model, blob_dataset)
        losses = np.array([s.loss for s in stats])
        grads = np.array([s.grad_norm for s in stats])
        anchors = select_easy_anchors(stats, blob_dataset, blob_model, q=3)
        for k, members in anchors.members.items():
            idx = blob_dataset.class_indices(k)
            q_k = anchors.effective_q[k]
            thr_loss = np.sort(losses[idx])[q_k - 1]
            thr_grad = np.sort(grads[idx])[q_k - 1]
            assert all(losses[m] <= thr_loss and grads[m] <= thr_grad for m in members)

    def test_shuffle_invariance(self, blob_model, blob_dataset):
        anchors = screen_anchors(blob_model, blob_dataset, q=2)
        perm = np.random.default_rng(0).permutation(len(blob_dataset))
        shuffled = blob_dataset.subset(perm)
        anchors_shuffled = screen_anchors(blob_model, shuffled, q=2)
        for k in (0, 1):
            original = set(anchors.members[k].tolist())
            remapped = {int(perm[i]) for i in anchors_shuffled.members[k]}
            assert original == remapped

    def test_q_monotonicity(self, blob_model, blob_dataset):
        sets = [screen_anchors(blob_model, blob_dataset, q=q) for q in (1, 2, 4, 8)]
        for small, big in zip(sets, sets[1:]):
            for k in (0, 1):
                assert set(small.members[k].tolist()) <= set(big.members[k].tolist())

    def test_anchor_in_convex_hull(self, blob_model, blob_dataset):
        anchors = screen_anchors(blob_model, blob_dataset, q=4)
        for k in (0, 1):
            feats = anchors.member_features[k]
            low, high = feats.min(axis=0), feats.max(axis=0)
            assert np.all(anchors.anchors[k] >= low - 1e-12)
            assert np.all(anchors.anchors[k] <= high + 1e-12)

    def test_disjoint_leaders_trigger_fallback(self):
        # loss argmin is sample 0, grad argmin is sample 1: q=1 intersection empty
        losses = np.array([0.1, 0.5, 0.9])
        grads = np.array([0.5, 0.1, 0.9])
        dataset = LabeledDataset(np.zeros((3, 2)), np.zeros(3, dtype=int))

        class Probe(nn.Module):
            def forward(self, x):
                return torch.zeros(x.shape[0], 1)

        anchors = select_easy_anchors(_stats_from_arrays(losses, grads), dataset, Probe(), q=1)
        assert anchors.effective_q[0] == 2
        assert anchors.members[0].tolist() == [0, 1]

    def test_insufficient_samples(self, blob_model):
        dataset = LabeledDataset(np.array([[-2.0, 0.0], [2.0, 0.0]]), np.array([0, 1]))
        with pytest.raises(InsufficientSamplesError):
            screen_anchors(blob_model, dataset, q=2)

    def test_non_finite_excluded_with_warning(self, blob_dataset, blob_model):
        stats = per_sample_stats(blob_model, blob_dataset)
        stats[0] = SampleStats(0, float("nan"), 1.0, finite=False)
        anchors = select_easy_anchors(stats, blob_dataset, blob_model, q=2)
        assert 0 not in anchors.members[int(blob_dataset.labels[0])]


class TestAnchorSetIO:
    def test_roundtrip(self, blob_model, blob_dataset, tmp_path):
        anchors = screen_anchors(blob_model, blob_dataset, q=2)
        path = tmp_path / "anchors.json"
        anchors.save(path)
        loaded = AnchorSet.load(path)
        assert loaded.q == anchors.q
        for k in anchors.members:
            assert loaded.members[k].tolist() == anchors.members[k].tolist()
            np.testing.assert_array_equal(loaded.anchors[k], anchors.anchors[k])
            assert loaded.effective_q[k] == anchors.effective_q[k]
