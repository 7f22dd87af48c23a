"""Shared fixtures: small datasets, trained models, session cache."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from esmakit.data import LabeledDataset
from esmakit.datasets import make_desk_dataset
from esmakit.models import TrainConfig, build_cnn, build_mlp, train_classifier

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def blob_dataset():
    """Two well-separated 2-D Gaussian blobs, 40 samples each."""
    gen = np.random.default_rng(7)
    points = np.concatenate(
        [gen.normal(-2.0, 0.7, size=(40, 2)), gen.normal(2.0, 0.7, size=(40, 2))]
    )
    labels = np.array([0] * 40 + [1] * 40)
    return LabeledDataset(points, labels)


@pytest.fixture(scope="session")
def blob_model(blob_dataset):
    model = build_mlp((16,), 2, 2, seed=11)
    train_classifier(model, blob_dataset, TrainConfig(max_epochs=80, lr=0.2, seed=11))
    return model


@pytest.fixture(scope="session")
def tiny_desk():
    """Small 4-class image dataset for generator/surrogate tests."""
    full = make_desk_dataset(12, n_classes=4, size=16, seed=3)
    return full


@pytest.fixture(scope="session")
def tiny_desk_model(tiny_desk):
    model = build_cnn("convnet", 3, tiny_desk.n_classes, seed=5)
    train_classifier(
        model,
        tiny_desk,
        TrainConfig(max_epochs=20, lr=0.05, seed=5, target_val_accuracy=0.99),
    )
    return model
