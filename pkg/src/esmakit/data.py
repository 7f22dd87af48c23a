"""Labeled sample collections shared by every module.

A :class:`LabeledDataset` is an indexed set of (feature, label) pairs where
features are either flat vectors ``(n, d)`` or images ``(n, C, H, W)`` and
labels are integers in ``[0, K)``. Index order is part of the contract:
reductions over samples run in ascending index order so that independent
brute-force checks can reproduce results exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LabeledDataset:
    """Indexed collection of samples with integer class labels.

    Parameters
    ----------
    features : (n, ...) array
        Sample features; flat vectors or image tensors. Stored as float64
        for vector data and float32 for image data by the constructors
        below, but any float dtype is accepted.
    labels : (n,) int array
        Class labels in ``[0, n_classes)``.
    n_classes : int, optional
        Number of classes; inferred as ``max(label) + 1`` when omitted.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int = field(default=0)

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"features ({self.features.shape[0]}) and labels "
                f"({self.labels.shape[0]}) disagree on sample count"
            )
        if self.n_classes <= 0:
            self.n_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels outside [0, n_classes)")

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_dim(self) -> int:
        """Flat dimensionality of one sample."""
        return int(np.prod(self.features.shape[1:]))

    def as_matrix(self) -> np.ndarray:
        """Features flattened to an (n, d) float64 matrix (no copy if possible)."""
        return np.ascontiguousarray(
            self.features.reshape(len(self), -1), dtype=np.float64
        )

    def class_indices(self, label: int) -> np.ndarray:
        """Ascending indices of the samples with the given label."""
        return np.flatnonzero(self.labels == label)

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        """A new dataset holding the selected rows (same n_classes)."""
        idx = np.asarray(indices)
        return LabeledDataset(self.features[idx], self.labels[idx], self.n_classes)
