"""Small classifiers and their mini-batch SGD training loop.

Provides the model families used everywhere in the toolkit: fully-connected
nets for the 2-D toy studies and three distinct small convolutional
architectures standing in for the usual surrogate/victim zoo at desk scale.

Training is plain mini-batch SGD, ``w <- w - eta_t * mean(grad)``, with a
configurable step-size schedule and early stopping on a held-out split
(best weights restored). Given the same architecture spec and seed, the
returned model is bit-identical across runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import LabeledDataset
from .rng import derive_seed, generator


class MLPClassifier(nn.Module):
    """Fully-connected ReLU classifier: input -> hidden dims -> K logits."""

    def __init__(self, in_dim: int, hidden: tuple[int, ...], n_classes: int):
        super().__init__()
        dims = [in_dim, *hidden]
        self.hidden = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(len(dims) - 1)
        )
        self.head = nn.Linear(dims[-1], n_classes)

    def forward(self, x):
        x = x.flatten(1)
        for layer in self.hidden:
            x = F.relu(layer(x))
        return self.head(x)


class SmallConvNet(nn.Module):
    """Plain conv stack: 3 conv/pool stages then a linear head."""

    def __init__(self, in_channels: int, n_classes: int, width: int = 32):
        super().__init__()
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, w, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(4),
        )
        self.head = nn.Linear(2 * w * 16, n_classes)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


class _ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        h = F.relu(self.conv1(x))
        return F.relu(x + self.conv2(h))


class SmallResNet(nn.Module):
    """Residual conv net: stem, two residual stages, linear head."""

    def __init__(self, in_channels: int, n_classes: int, width: int = 24):
        super().__init__()
        w = width
        self.stem = nn.Conv2d(in_channels, w, 3, padding=1)
        self.stage1 = _ResBlock(w)
        self.down1 = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.stage2 = _ResBlock(2 * w)
        self.down2 = nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1)
        self.pool = nn.AdaptiveAvgPool2d(2)
        self.head = nn.Linear(2 * w * 4, n_classes)

    def forward(self, x):
        x = F.relu(self.stem(x))
        x = self.stage1(x)
        x = F.relu(self.down1(x))
        x = self.stage2(x)
        x = F.relu(self.down2(x))
        return self.head(self.pool(x).flatten(1))


class SmallVGG(nn.Module):
    """VGG-style double-conv blocks (batch-normed) with max pooling."""

    def __init__(self, in_channels: int, n_classes: int, width: int = 20):
        super().__init__()
        w = width

        def block(cin, cout):
            return [
                nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(),
                nn.Conv2d(cout, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(),
                nn.MaxPool2d(2),
            ]

        self.features = nn.Sequential(
            *block(in_channels, w), *block(w, 2 * w), nn.AdaptiveAvgPool2d(2)
        )
        self.head = nn.Sequential(
            nn.Linear(2 * w * 4, 64), nn.ReLU(), nn.Linear(64, n_classes)
        )

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


CNN_ARCHITECTURES = ("convnet", "resnet", "vgg")


def build_cnn(arch: str, in_channels: int, n_classes: int, seed: int) -> nn.Module:
    """Construct one of the small CNN architectures with seeded init."""
    torch.manual_seed(derive_seed(seed, "init", arch))
    if arch == "convnet":
        return SmallConvNet(in_channels, n_classes)
    if arch == "resnet":
        return SmallResNet(in_channels, n_classes)
    if arch == "vgg":
        return SmallVGG(in_channels, n_classes)
    raise ValueError(f"unknown architecture {arch!r}; choose from {CNN_ARCHITECTURES}")


def build_mlp(hidden: tuple[int, ...], in_dim: int, n_classes: int, seed: int) -> MLPClassifier:
    """Construct an MLP with seeded init."""
    torch.manual_seed(derive_seed(seed, "init", "mlp", *(str(h) for h in hidden)))
    return MLPClassifier(in_dim, tuple(hidden), n_classes)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@dataclass
class TrainConfig:
    """Knobs for the classifier training loop.

    The default optimizer is plain mini-batch SGD whose step size follows
    an inverse-time schedule ``eta_t = lr * decay_steps / (decay_steps + t)``
    over optimizer steps t; ``optimizer="adam"`` swaps in Adam with a flat
    rate for the desk-scale surrogates where wall clock matters. Early
    stopping evaluates the validation loss every ``eval_every`` epochs and
    stops after ``patience`` evaluations without improvement, restoring the
    best weights; ``target_val_accuracy`` adds a stop-when-good-enough exit.
    """

    batch_size: int = 32
    max_epochs: int = 200
    lr: float = 0.1
    optimizer: str = "sgd"
    decay_steps: float = 200.0
    val_fraction: float = 0.2
    patience: int = 5
    eval_every: int = 1
    target_val_accuracy: float | None = None
    seed: int = 0


@dataclass
class TrainResult:
    train_accuracy: float
    val_loss: float
    epochs_run: int
    converged: bool
    loss_history: list[float] = field(default_factory=list)


def model_dtype(model: nn.Module) -> torch.dtype:
    """Parameter dtype of the model (float32 unless the model was cast)."""
    for p in model.parameters():
        return p.dtype
    return torch.float32


def _to_tensor(features: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(features)).to(dtype)


def predict_logits(model: nn.Module, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Model logits for every row of ``features``, as float64."""
    model.eval()
    dtype = model_dtype(model)
    out = []
    with torch.no_grad():
        for start in range(0, len(features), batch_size):
            x = _to_tensor(features[start : start + batch_size], dtype)
            out.append(model(x).double().numpy())
    if not out:
        return np.zeros((0, 0))
    return np.concatenate(out, axis=0)


def predict_labels(model: nn.Module, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return predict_logits(model, features, batch_size).argmax(axis=1)


def accuracy(model: nn.Module, dataset: LabeledDataset) -> float:
    preds = predict_labels(model, dataset.features)
    return float((preds == dataset.labels).mean())


def train_classifier(
    model: nn.Module, dataset: LabeledDataset, config: TrainConfig
) -> TrainResult:
    """Train with mini-batch SGD and early stopping; mutates the model.

    Steps sample batches without replacement per epoch from the training
    split; each step applies ``w <- w - eta_t * mean over batch of grad``.
    """
    rng = generator(config.seed, "sgd-batches")
    n = len(dataset)
    n_val = max(1, int(round(config.val_fraction * n))) if n > 4 else 0
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    x_train = _to_tensor(dataset.features[train_idx])
    y_train = torch.from_numpy(dataset.labels[train_idx])
    x_val = _to_tensor(dataset.features[val_idx]) if n_val else None
    y_val = torch.from_numpy(dataset.labels[val_idx]) if n_val else None

    if config.optimizer == "adam":
        opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    elif config.optimizer == "sgd":
        opt = torch.optim.SGD(model.parameters(), lr=config.lr)
    else:
        raise ValueError(f"optimizer must be 'sgd' or 'adam', got {config.optimizer!r}")
    best_val = math.inf
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    bad_evals = 0
    step = 0
    history: list[float] = []
    epochs_run = 0
    converged = False

    for epoch in range(config.max_epochs):
        epochs_run = epoch + 1
        model.train()
        order = rng.permutation(len(train_idx))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = torch.from_numpy(order[start : start + config.batch_size])
            if config.optimizer == "sgd":
                eta = config.lr * config.decay_steps / (config.decay_steps + step)
                for group in opt.param_groups:
                    group["lr"] = eta
            opt.zero_grad()
            loss = F.cross_entropy(model(x_train[batch]), y_train[batch])
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
            step += 1
        history.append(epoch_loss / max(n_batches, 1))

        if n_val and (epoch + 1) % config.eval_every == 0:
            model.eval()
            with torch.no_grad():
                val_logits = model(x_val)
                val_loss = float(F.cross_entropy(val_logits, y_val))
                val_acc = float((val_logits.argmax(dim=1) == y_val).float().mean())
            if val_loss < best_val - 1e-6:
                best_val = val_loss
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                bad_evals = 0
            else:
                bad_evals += 1
            if bad_evals >= config.patience or (
                config.target_val_accuracy is not None
                and val_acc >= config.target_val_accuracy
            ):
                converged = True
                break

    model.load_state_dict(best_state if n_val else model.state_dict())
    model.eval()
    return TrainResult(
        train_accuracy=accuracy(model, dataset),
        val_loss=best_val if n_val else float("nan"),
        epochs_run=epochs_run,
        converged=converged or epochs_run < config.max_epochs,
        loss_history=history,
    )
