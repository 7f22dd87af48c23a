"""Class-embedding pretraining by pairwise-structure matching.

The attack generator carries one embedding vector per class. Before
generator training these embeddings are fitted so that their pairwise
Euclidean-distance and cosine-similarity structure mimics that of the
surrogate's class-mean features: both structures are turned into
row-stochastic matrices (row softmax) and pulled together with a symmetric
KL divergence, plus a small norm term that keeps the embeddings from
collapsing to zero. After pretraining the embeddings are frozen.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .data import LabeledDataset
from .models import predict_logits


class DivergenceError(RuntimeError):
    """Pretraining produced a non-finite loss."""


@dataclass(frozen=True)
class PairMatrices:
    """Pairwise Euclidean distances and cosine similarities of K vectors."""

    euclidean: np.ndarray
    cosine: np.ndarray


@dataclass
class EmbeddingBank:
    """K class embeddings, the class-mean features they mimic, and weights.

    ``lambda1`` weights the cosine-structure term, ``lambda2`` the
    anti-collapse norm term.
    """

    embeddings: np.ndarray
    class_means: np.ndarray
    lambda1: float = 1.0
    lambda2: float = 1e-3

    def __post_init__(self) -> None:
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.class_means = np.asarray(self.class_means, dtype=np.float64)
        if self.embeddings.shape[0] != self.class_means.shape[0]:
            raise ValueError("embeddings and class_means must agree on class count")
        if self.embeddings.shape[0] < 2:
            raise ValueError("need at least 2 classes")
        if not (np.isfinite(self.embeddings).all() and np.isfinite(self.class_means).all()):
            raise ValueError("non-finite vectors in bank")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda weights must be non-negative")

    @property
    def n_classes(self) -> int:
        return int(self.embeddings.shape[0])

    @property
    def width(self) -> int:
        return int(self.embeddings.shape[1])

    def save(self, path: str | Path) -> None:
        payload = {
            "n_classes": self.n_classes,
            "width": self.width,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "embeddings": self.embeddings.tolist(),
            "class_means": self.class_means.tolist(),
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingBank":
        payload = json.loads(Path(path).read_text())
        return cls(
            embeddings=np.asarray(payload["embeddings"], dtype=np.float64),
            class_means=np.asarray(payload["class_means"], dtype=np.float64),
            lambda1=float(payload["lambda1"]),
            lambda2=float(payload["lambda2"]),
        )


def class_mean_features(model: torch.nn.Module, dataset: LabeledDataset) -> np.ndarray:
    """Per-class arithmetic mean of the surrogate logits, shape (K, width)."""
    logits = predict_logits(model, dataset.features)
    means = np.zeros((dataset.n_classes, logits.shape[1]))
    for k in range(dataset.n_classes):
        idx = dataset.class_indices(k)
        if len(idx) == 0:
            raise ValueError(f"class {k} is empty")
        means[k] = logits[idx].mean(axis=0)
    return means


def pairwise_matrices(vectors: np.ndarray) -> PairMatrices:
    """Exact pairwise distance/cosine matrices, computed once per pair.

    Each unordered pair is evaluated a single time and mirrored, so the
    matrices are symmetric bit-exactly. The Euclidean diagonal is zero and
    the cosine diagonal is one by construction. A zero vector makes cosine
    similarity undefined and raises.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    k = vectors.shape[0]
    if k < 2:
        raise ValueError("need at least 2 vectors")
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero vector encountered; cosine similarity undefined")
    euc = np.zeros((k, k))
    cos = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            d = float(np.linalg.norm(vectors[i] - vectors[j]))
            c = float(vectors[i] @ vectors[j] / (norms[i] * norms[j]))
            euc[i, j] = euc[j, i] = d
            cos[i, j] = cos[j, i] = c
    return PairMatrices(euclidean=euc, cosine=cos)


def row_softmax(matrix: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if not np.isfinite(matrix).all():
        raise ValueError("matrix entries must be finite")
    shifted = matrix - matrix.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _structure_matrices_torch(vectors: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable pairwise distance/cosine matrices, exact diagonals."""
    k = vectors.shape[0]
    eye = torch.eye(k, dtype=vectors.dtype)
    diff = vectors[:, None, :] - vectors[None, :, :]
    sq = (diff * diff).sum(-1)
    # diagonal guarded before sqrt so its (undefined) gradient never flows
    euc = torch.sqrt(sq + eye) * (1.0 - eye)
    norms = torch.sqrt((vectors * vectors).sum(-1))
    cos = (vectors @ vectors.T) / (norms[:, None] * norms[None, :])
    cos = cos * (1.0 - eye) + eye
    return euc, cos


def _row_softmax_torch(matrix: torch.Tensor) -> torch.Tensor:
    return torch.softmax(matrix, dim=1)


def _kl_sum(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    return (p * (torch.log(p) - torch.log(q))).sum()


def _loss_torch(emb: torch.Tensor, means: torch.Tensor, lambda1: float, lambda2: float):
    s_euc, s_cos = _structure_matrices_torch(means)
    e_euc, e_cos = _structure_matrices_torch(emb)
    sb_euc, sb_cos = _row_softmax_torch(s_euc), _row_softmax_torch(s_cos)
    eb_euc, eb_cos = _row_softmax_torch(e_euc), _row_softmax_torch(e_cos)
    loss = _kl_sum(sb_euc, eb_euc) + _kl_sum(eb_euc, sb_euc)
    loss = loss + lambda1 * (_kl_sum(sb_cos, eb_cos) + _kl_sum(eb_cos, sb_cos))
    loss = loss + lambda2 * torch.sqrt((emb * emb).sum(-1)).sum()
    return loss


def manifold_matching_loss(bank: EmbeddingBank) -> float:
    """Structure-matching loss of the bank's embeddings against its means.

    Symmetric KL between the row-softmaxed Euclidean matrices, plus
    ``lambda1`` times the symmetric KL between the row-softmaxed cosine
    matrices, plus ``lambda2 * sum_i ||e_i||``. Natural-log KL throughout.
    """
    emb = torch.from_numpy(bank.embeddings)
    means = torch.from_numpy(bank.class_means)
    return float(_loss_torch(emb, means, bank.lambda1, bank.lambda2))


def manifold_loss_gradient(bank: EmbeddingBank) -> np.ndarray:
    """Analytic gradient of the loss w.r.t. the embeddings (float64)."""
    emb = torch.from_numpy(bank.embeddings.copy()).requires_grad_(True)
    means = torch.from_numpy(bank.class_means)
    loss = _loss_torch(emb, means, bank.lambda1, bank.lambda2)
    loss.backward()
    return emb.grad.numpy().copy()


def pretrain_embeddings(
    bank: EmbeddingBank, step_size: float = 0.05, steps: int = 500
) -> tuple[EmbeddingBank, list[float]]:
    """Plain gradient descent on the matching loss; embeddings then freeze.

    Returns the trained bank (a new object; the input is untouched) and the
    recorded loss trajectory. Aborts with :class:`DivergenceError` when the
    loss goes non-finite.
    """
    emb = torch.from_numpy(bank.embeddings.copy()).requires_grad_(True)
    means = torch.from_numpy(bank.class_means)
    trajectory: list[float] = []
    for step in range(steps):
        if emb.grad is not None:
            emb.grad.zero_()
        loss = _loss_torch(emb, means, bank.lambda1, bank.lambda2)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise DivergenceError(f"loss became non-finite at step {step}")
        trajectory.append(value)
        loss.backward()
        with torch.no_grad():
            emb -= step_size * emb.grad
    trained = replace(bank, embeddings=emb.detach().numpy().copy())
    return trained, trajectory


def mean_pairwise_cosine(vectors: np.ndarray) -> float:
    """Mean off-diagonal cosine similarity; the declustering diagnostic."""
    cos = pairwise_matrices(vectors).cosine
    k = cos.shape[0]
    off = cos[~np.eye(k, dtype=bool)]
    return float(off.mean())
