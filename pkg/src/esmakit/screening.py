"""Easy-sample screening: per-sample difficulty stats and anchor construction.

For an early-stopped classifier, samples with simultaneously small loss and
small input-gradient norm sit in high-density regions of their class. The
screening pass ranks both statistics within each class, keeps the samples
below the q-th-smallest thresholds on *both*, and averages their surrogate
features into a per-class anchor that later guides the attack generator.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabeledDataset
from .models import predict_logits


class InsufficientSamplesError(ValueError):
    """A class has fewer finite-stat samples than the screening parameter q."""


@dataclass(frozen=True)
class SampleStats:
    """Per-sample difficulty statistics under the surrogate.

    ``loss`` is the softmax cross-entropy against the true label;
    ``grad_norm`` is the Euclidean norm of its gradient w.r.t. the
    flattened input. ``finite`` is False when either statistic came out
    non-finite; such samples are excluded from screening.
    """

    sample_index: int
    loss: float
    grad_norm: float
    finite: bool = True


@dataclass
class AnchorSet:
    """Per-class easy-sample index sets and their mean surrogate features.

    ``members[k]`` are ascending dataset indices passing both thresholds for
    class k, ``anchors[k]`` is the mean of the surrogate logits over those
    members, and ``member_features[k]`` keeps the individual member logits
    so a random member can stand in for the mean during training.
    ``effective_q[k]`` records the per-class q actually used (it grows past
    the requested q only when the two rankings share no sample).
    """

    q: int
    members: dict[int, np.ndarray]
    anchors: dict[int, np.ndarray]
    member_features: dict[int, np.ndarray]
    effective_q: dict[int, int] = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.anchors)

    def anchor_matrix(self) -> np.ndarray:
        """Anchors stacked in class order, shape (K, feature_width)."""
        return np.stack([self.anchors[k] for k in sorted(self.anchors)], axis=0)

    def save(self, path: str | Path) -> None:
        """Persist as JSON: per class, member indices, effective q, anchor."""
        payload = {
            "q": self.q,
            "classes": {
                str(k): {
                    "members": self.members[k].tolist(),
                    "effective_q": int(self.effective_q.get(k, self.q)),
                    "anchor": self.anchors[k].tolist(),
                    "member_features": self.member_features[k].tolist(),
                }
                for k in sorted(self.anchors)
            },
        }
        Path(path).write_text(json.dumps(payload, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "AnchorSet":
        payload = json.loads(Path(path).read_text())
        members, anchors, feats, eff = {}, {}, {}, {}
        for key, entry in payload["classes"].items():
            k = int(key)
            members[k] = np.asarray(entry["members"], dtype=np.int64)
            anchors[k] = np.asarray(entry["anchor"], dtype=np.float64)
            feats[k] = np.asarray(entry["member_features"], dtype=np.float64)
            eff[k] = int(entry["effective_q"])
        return cls(
            q=int(payload["q"]), members=members, anchors=anchors,
            member_features=feats, effective_q=eff,
        )


def per_sample_stats(
    model: torch.nn.Module, dataset: LabeledDataset, batch_size: int = 128
) -> list[SampleStats]:
    """Loss and input-gradient norm for every sample, in index order.

    Gradients are taken w.r.t. the input only; model parameters are left
    untouched. Samples with non-finite loss or gradient are flagged and
    later excluded from screening (with a warning).
    """
    from .models import model_dtype

    model.eval()
    dtype = model_dtype(model)
    stats: list[SampleStats] = []
    n_bad = 0
    for start in range(0, len(dataset), batch_size):
        feats = np.ascontiguousarray(dataset.features[start : start + batch_size])
        x = torch.from_numpy(feats).to(dtype).requires_grad_(True)
        y = torch.from_numpy(dataset.labels[start : start + batch_size])
        losses = F.cross_entropy(model(x), y, reduction="none")
        losses.sum().backward()
        losses = losses.detach()
        grad_norms = x.grad.flatten(1).norm(dim=1)
        for j in range(len(y)):
            loss_j = float(losses[j])
            grad_j = float(grad_norms[j])
            finite = np.isfinite(loss_j) and np.isfinite(grad_j)
            if not finite:
                n_bad += 1
            stats.append(
                SampleStats(sample_index=start + j, loss=loss_j, grad_norm=grad_j, finite=finite)
            )
    if n_bad:
        warnings.warn(f"{n_bad} sample(s) had non-finite stats and will be excluded")
    return stats


def _qth_smallest(values: np.ndarray, q: int) -> float:
    return float(np.sort(values)[q - 1])


def select_easy_anchors(
    stats: list[SampleStats],
    dataset: LabeledDataset,
    model: torch.nn.Module,
    q: int,
) -> AnchorSet:
    """Keep the jointly-easy samples of each class and average their features.

    Thresholds are the q-th smallest loss and q-th smallest gradient norm
    within the class; membership requires being <= both (the <= makes the
    q-th-ranked sample itself qualify). If the two rankings share no sample,
    q is raised for that class alone until the intersection is non-empty,
    and the effective q is recorded.
    """
    if q < 1:
        raise ValueError(f"q must be >= 1, got {q}")
    losses = np.array([s.loss for s in stats])
    grads = np.array([s.grad_norm for s in stats])
    finite = np.array([s.finite for s in stats])
    order = np.array([s.sample_index for s in stats])
    if not np.array_equal(order, np.arange(len(dataset))):
        raise ValueError("stats must cover the dataset in index order")

    logits = predict_logits(model, dataset.features)
    members: dict[int, np.ndarray] = {}
    anchors: dict[int, np.ndarray] = {}
    feats: dict[int, np.ndarray] = {}
    effective: dict[int, int] = {}

    for k in range(dataset.n_classes):
        idx = dataset.class_indices(k)
        idx = idx[finite[idx]]
        if len(idx) < q:
            raise InsufficientSamplesError(
                f"class {k} has {len(idx)} finite samples, need at least q={q}"
            )
        q_k = q
        while True:
            thr_loss = _qth_smallest(losses[idx], q_k)
            thr_grad = _qth_smallest(grads[idx], q_k)
            selected = idx[(losses[idx] <= thr_loss) & (grads[idx] <= thr_grad)]
            if len(selected) or q_k >= len(idx):
                break
            q_k += 1
        members[k] = selected
        effective[k] = q_k
        feats[k] = logits[selected]
        anchors[k] = logits[selected].mean(axis=0)

    return AnchorSet(
        q=q, members=members, anchors=anchors, member_features=feats, effective_q=effective
    )


def screen_anchors(
    model: torch.nn.Module, dataset: LabeledDataset, q: int, batch_size: int = 128
) -> AnchorSet:
    """Convenience wrapper: stats pass then anchor selection."""
    return select_easy_anchors(per_sample_stats(model, dataset, batch_size), dataset, model, q)
