"""Two-dimensional Gaussian toy experiments.

Small, fully controlled setting used to check the premise of the attack:
several independently trained classifiers agree most where the local sample
density of a class is high, and samples that are easy (low loss, low input
gradient norm) for an early-stopped model sit in those regions. Everything
here is measured as binned curves plus rank correlations; the curves
themselves are seed-dependent and never asserted point-wise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .data import LabeledDataset
from .density import BinnedStatistic, DensityQuery, density_binned_statistic, local_empirical_risk, local_sample_density
from .models import MLPClassifier, TrainConfig, TrainResult, build_mlp, predict_logits, train_classifier
from .rng import generator as make_rng
from .screening import per_sample_stats

TOY_MLP_SPECS: tuple[tuple[int, ...], ...] = ((8,), (16, 8), (32, 16))


@dataclass
class ToyTask:
    """Mixture of 2-D Gaussian populations.

    Defaults follow the two-population layout used throughout: means at
    (-1.5, 0) and (1.5, 0), identity covariances, equal weights.
    """

    means: np.ndarray = field(default_factory=lambda: np.array([[-1.5, 0.0], [1.5, 0.0]]))
    covariances: np.ndarray = field(default_factory=lambda: np.stack([np.eye(2), np.eye(2)]))
    weights: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5]))
    n_samples: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not np.isclose(self.weights.sum(), 1.0):
            raise ValueError("mixture weights must sum to 1")
        for cov in self.covariances:
            eigvals = np.linalg.eigvalsh(cov)
            if eigvals.min() <= 0:
                raise ValueError("covariances must be positive definite")

    @property
    def n_classes(self) -> int:
        return len(self.weights)


@dataclass
class GridReport:
    """Per-grid-point posteriors, model outputs and their disagreement."""

    grid: np.ndarray
    posteriors: np.ndarray | None = None
    decisions: np.ndarray | None = None
    model_outputs: list[np.ndarray] = field(default_factory=list)
    difference: np.ndarray | None = None


@dataclass
class ConsistencyReport:
    """The four binned curves plus their per-sample raw ingredients.

    Curves: model output difference vs density bin; local risk vs
    loss+gradnorm bin; local risk vs density bin; density vs loss+gradnorm
    bin. ``spearman`` maps curve name to the rank correlation between bin
    index and bin mean over populated bins.
    """

    radius: float
    densities: np.ndarray
    output_difference: np.ndarray
    local_risk: np.ndarray
    loss_gradnorm: np.ndarray
    difference_vs_density: BinnedStatistic = None
    risk_vs_lossgrad: BinnedStatistic = None
    risk_vs_density: BinnedStatistic = None
    density_vs_lossgrad: BinnedStatistic = None
    spearman: dict[str, float] = field(default_factory=dict)


def make_toy_dataset(task: ToyTask) -> LabeledDataset:
    """Seeded i.i.d. draws from the mixture with population labels."""
    rng = make_rng(task.seed, "toy-data")
    labels = rng.choice(task.n_classes, size=task.n_samples, p=task.weights)
    points = np.zeros((task.n_samples, 2))
    for i, lab in enumerate(labels):
        points[i] = rng.multivariate_normal(task.means[lab], task.covariances[lab])
    return LabeledDataset(points, labels, n_classes=task.n_classes)


def make_grid(points: np.ndarray, resolution: int = 200, pad: float = 0.2) -> np.ndarray:
    """Regular grid over the bounding box of ``points``, padded on each side."""
    lo, hi = points.min(axis=0), points.max(axis=0)
    span = hi - lo
    lo, hi = lo - pad * span, hi + pad * span
    xs = np.linspace(lo[0], hi[0], resolution)
    ys = np.linspace(lo[1], hi[1], resolution)
    xx, yy = np.meshgrid(xs, ys)
    return np.column_stack([xx.ravel(), yy.ravel()])


def _gaussian_pdf(points: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = points.shape[1]
    inv = np.linalg.inv(cov)
    det = np.linalg.det(cov)
    diff = points - mean
    exponent = -0.5 * np.einsum("ij,jk,ik->i", diff, inv, diff)
    return np.exp(exponent) / np.sqrt(((2 * np.pi) ** d) * det)


def bayes_posterior(task: ToyTask, grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact mixture posterior per grid point and the induced decisions.

    Ties break toward the lower class index (argmax convention).
    """
    grid = np.asarray(grid, dtype=np.float64)
    joint = np.stack(
        [
            task.weights[k] * _gaussian_pdf(grid, task.means[k], task.covariances[k])
            for k in range(task.n_classes)
        ],
        axis=1,
    )
    posteriors = joint / joint.sum(axis=1, keepdims=True)
    return posteriors, posteriors.argmax(axis=1)


def train_toy_models(
    dataset: LabeledDataset,
    specs: tuple[tuple[int, ...], ...] = TOY_MLP_SPECS,
    config: TrainConfig | None = None,
) -> tuple[list[MLPClassifier], list[TrainResult]]:
    """Train one small MLP per spec with the standard SGD loop."""
    config = config or TrainConfig(max_epochs=150, lr=0.2, batch_size=16)
    models, results = [], []
    for i, spec in enumerate(specs):
        model = build_mlp(spec, dataset.feature_dim, dataset.n_classes, seed=config.seed + i)
        cfg = TrainConfig(**{**config.__dict__, "seed": config.seed + i})
        results.append(train_classifier(model, dataset, cfg))
        models.append(model)
    return models, results


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def mean_pairwise_output_difference(models: list, points: np.ndarray) -> np.ndarray:
    """Per-point mean pairwise L-inf distance between model softmax outputs."""
    if len(models) < 2:
        raise ValueError("need at least 2 models")
    probs = [_softmax(predict_logits(m, points.astype(np.float64))) for m in models]
    n_pairs = 0
    total = np.zeros(len(points))
    for i in range(len(models)):
        for j in range(i + 1, len(models)):
            total += np.abs(probs[i] - probs[j]).max(axis=1)
            n_pairs += 1
    return total / n_pairs


def output_difference_map(models: list, grid: np.ndarray) -> GridReport:
    """Grid report of the models' outputs and their mean pairwise difference."""
    grid = np.asarray(grid, dtype=np.float64)
    outputs = [_softmax(predict_logits(m, grid)) for m in models]
    return GridReport(
        grid=grid,
        model_outputs=outputs,
        difference=mean_pairwise_output_difference(models, grid),
    )


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def consistency_report(
    models: list, dataset: LabeledDataset, r: float, n_bins: int = 10
) -> ConsistencyReport:
    """The four density/difficulty curves over the dataset's own samples.

    Per sample i the ingredients are: the local density of its own class in
    the radius-r ball around it; the mean pairwise output difference of the
    models at it; the local empirical risk of its neighborhood (per-sample
    losses averaged across models); and its loss+gradnorm score (each
    statistic min-max normalized across samples, then summed, averaging
    across models first).
    """
    if r <= 0:
        raise ValueError("r must be positive")
    n = len(dataset)
    densities = np.zeros(n)
    for i in range(n):
        query = DensityQuery(int(dataset.labels[i]), dataset.features[i], r)
        densities[i] = local_sample_density(dataset, query).density

    diff = mean_pairwise_output_difference(models, dataset.features)

    all_losses = np.zeros((len(models), n))
    all_grads = np.zeros((len(models), n))
    for m_idx, model in enumerate(models):
        stats = per_sample_stats(model, dataset)
        all_losses[m_idx] = [s.loss for s in stats]
        all_grads[m_idx] = [s.grad_norm for s in stats]
    mean_losses = all_losses.mean(axis=0)
    mean_grads = all_grads.mean(axis=0)
    loss_gradnorm = _minmax(mean_losses) + _minmax(mean_grads)

    risks = np.zeros(n)
    for i in range(n):
        query = DensityQuery(int(dataset.labels[i]), dataset.features[i], r)
        risks[i] = local_empirical_risk(mean_losses, dataset, query).mean_loss

    report = ConsistencyReport(
        radius=r,
        densities=densities,
        output_difference=diff,
        local_risk=risks,
        loss_gradnorm=loss_gradnorm,
        difference_vs_density=density_binned_statistic(diff, densities, n_bins),
        risk_vs_lossgrad=density_binned_statistic(risks, loss_gradnorm, n_bins),
        risk_vs_density=density_binned_statistic(risks, densities, n_bins),
        density_vs_lossgrad=density_binned_statistic(densities, loss_gradnorm, n_bins),
    )
    for name, stat in [
        ("difference_vs_density", report.difference_vs_density),
        ("risk_vs_lossgrad", report.risk_vs_lossgrad),
        ("risk_vs_density", report.risk_vs_density),
        ("density_vs_lossgrad", report.density_vs_lossgrad),
    ]:
        report.spearman[name] = binned_spearman(stat)
    return report


def binned_spearman(stat: BinnedStatistic) -> float:
    """Spearman rank correlation between bin index and bin mean (populated bins)."""
    idx = np.flatnonzero(stat.populated)
    if len(idx) < 2:
        return float("nan")
    rho, _ = spearmanr(idx, stat.means[idx])
    return float(rho)
