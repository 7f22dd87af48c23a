"""Local sample density, ball volumes, local empirical risk, binned statistics.

The density of a class around a point is the number of same-class samples
inside a closed Euclidean ball divided by the ball's volume. These are the
primitive measurements behind the easy-sample analysis and the density-shift
experiments; everything here is deliberately the naive O(n) computation so
that it can double as the reference oracle for higher modules.

Conventions fixed here (and relied on by the oracle tests):

* the ball is closed: a point at distance exactly ``r`` counts;
* a query centered on a dataset sample of the queried class counts itself;
* all reductions over samples run in ascending index order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .data import LabeledDataset


class EmptyNeighborhoodError(ValueError):
    """Raised when a local statistic is requested over an empty index set."""


@dataclass(frozen=True)
class DensityQuery:
    """A (class, center, radius) lookup against a dataset.

    Attributes
    ----------
    class_label : int
        Class whose samples are counted.
    center : (d,) array
        Ball center, in the same feature space as the dataset.
    radius : float
        Ball radius, strictly positive.
    """

    class_label: int
    center: np.ndarray
    radius: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).ravel())
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if self.class_label < 0:
            raise ValueError(f"class_label must be non-negative, got {self.class_label}")


@dataclass(frozen=True)
class DensityEstimate:
    """Ball count, ball volume and their ratio for one query."""

    count_in_ball: int
    ball_volume: float
    density: float

    def __post_init__(self) -> None:
        if self.count_in_ball < 0:
            raise ValueError("count_in_ball must be non-negative")
        if not self.ball_volume > 0:
            raise ValueError("ball_volume must be positive")


@dataclass(frozen=True)
class LocalRisk:
    """Mean per-sample loss over the in-ball same-class neighborhood."""

    neighborhood_indices: np.ndarray
    mean_loss: float


@dataclass(frozen=True)
class BinnedStatistic:
    """Per-bin means and counts over equal-width bins on [0, 1].

    ``means[b]`` is NaN for empty bins; ``populated`` marks bins with at
    least one sample. ``degenerate`` is set when the binning variable was
    constant, in which case everything lands in a single bin.
    """

    bin_edges: np.ndarray
    means: np.ndarray
    counts: np.ndarray
    populated: np.ndarray = field(default=None)
    degenerate: bool = False

    def __post_init__(self) -> None:
        if self.populated is None:
            object.__setattr__(self, "populated", self.counts > 0)


def log_ball_volume(dimension: int, radius: float) -> float:
    """Natural log of the d-ball volume: d/2*ln(pi) + d*ln(r) - lnGamma(d/2 + 1)."""
    if dimension < 1:
        raise ValueError(f"dimension must be >= 1, got {dimension}")
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    d = float(dimension)
    return 0.5 * d * math.log(math.pi) + d * math.log(radius) - float(gammaln(d / 2.0 + 1.0))


def ball_volume(dimension: int, radius: float) -> float:
    """Volume of the d-dimensional Euclidean ball of the given radius.

    Computed in log space so the Gamma function cannot overflow for large d.
    At extreme d * ln(r) the volume itself leaves float range; the result is
    then inf (or 0.0 on underflow), which is why high-dimensional density
    comparisons use the count-only mode instead (volume cancels in ratios).
    """
    log_vol = log_ball_volume(dimension, radius)
    try:
        return math.exp(log_vol)
    except OverflowError:
        return math.inf


def ball_count(dataset: LabeledDataset, query: DensityQuery) -> int:
    """Number of samples of the queried class inside the closed ball.

    This is the unnormalized count-only mode: at very high dimension the
    ball volume under- or overflows, but density *ratios* at fixed (d, r)
    reduce to count ratios, so comparisons can use raw counts.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    matrix = dataset.as_matrix()
    if query.center.shape[0] != matrix.shape[1]:
        raise ValueError(
            f"query center dimension {query.center.shape[0]} does not match "
            f"dataset dimension {matrix.shape[1]}"
        )
    class_idx = dataset.class_indices(query.class_label)
    if len(class_idx) == 0:
        return 0
    diffs = matrix[class_idx] - query.center[None, :]
    dists = np.sqrt(np.einsum("ij,ij->i", diffs, diffs))
    return int(np.count_nonzero(dists <= query.radius))


def neighborhood_indices(dataset: LabeledDataset, query: DensityQuery) -> np.ndarray:
    """Ascending dataset indices of the queried class inside the closed ball."""
    matrix = dataset.as_matrix()
    class_idx = dataset.class_indices(query.class_label)
    if len(class_idx) == 0:
        return class_idx
    diffs = matrix[class_idx] - query.center[None, :]
    dists = np.sqrt(np.einsum("ij,ij->i", diffs, diffs))
    return class_idx[dists <= query.radius]


def local_sample_density(dataset: LabeledDataset, query: DensityQuery) -> DensityEstimate:
    """Count-per-volume density of one class in a closed ball.

    The count is the number of samples with the queried label at Euclidean
    distance <= radius from the center (boundary inclusive; the center
    itself counts when it is such a sample).
    """
    count = ball_count(dataset, query)
    volume = ball_volume(dataset.feature_dim, query.radius)
    return DensityEstimate(count_in_ball=count, ball_volume=volume, density=count / volume)


def _ascending_mean(values: np.ndarray) -> float:
    """Mean via a left-to-right sequential sum (matches a naive += loop)."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        raise ValueError("mean of empty array")
    return float(np.cumsum(values)[-1]) / len(values)


def local_empirical_risk(
    loss_values: np.ndarray, dataset: LabeledDataset, query: DensityQuery
) -> LocalRisk:
    """Mean loss over the same-class in-ball neighborhood of the query.

    ``loss_values`` must align with dataset indices. Raises
    :class:`EmptyNeighborhoodError` when no same-class sample falls inside
    the ball; the caller decides the fallback.
    """
    loss_values = np.asarray(loss_values, dtype=np.float64)
    if loss_values.shape[0] != len(dataset):
        raise ValueError("loss_values must align with dataset indices")
    idx = neighborhood_indices(dataset, query)
    if len(idx) == 0:
        raise EmptyNeighborhoodError(
            f"no class-{query.class_label} sample within r={query.radius} of the center"
        )
    return LocalRisk(neighborhood_indices=idx, mean_loss=_ascending_mean(loss_values[idx]))


def density_binned_statistic(
    values: np.ndarray, densities: np.ndarray, n_bins: int
) -> BinnedStatistic:
    """Bin value/density pairs into equal-width bins over the normalized range.

    Densities are min-max normalized to [0, 1]; bin b covers
    ``[b/n_bins, (b+1)/n_bins)`` with the last bin closed on the right.
    Returns the per-bin mean of ``values`` and the per-bin sample count;
    empty bins are flagged rather than averaged. All-equal densities
    degenerate to a single populated bin, signaled by ``degenerate``.
    """
    values = np.asarray(values, dtype=np.float64)
    densities = np.asarray(densities, dtype=np.float64)
    if values.shape != densities.shape:
        raise ValueError("values and densities must align")
    if n_bins < 2:
        raise ValueError(f"n_bins must be >= 2, got {n_bins}")
    if np.any(densities < 0):
        raise ValueError("densities must be non-negative")

    lo, hi = float(densities.min()), float(densities.max())
    degenerate = hi == lo
    if degenerate:
        normalized = np.zeros_like(densities)
    else:
        normalized = (densities - lo) / (hi - lo)

    edges = np.linspace(0.0, 1.0, n_bins + 1)
    # right edge of the last bin is inclusive so the max lands in bin n_bins-1
    bin_of = np.minimum((normalized * n_bins).astype(np.int64), n_bins - 1)

    means = np.full(n_bins, np.nan)
    counts = np.zeros(n_bins, dtype=np.int64)
    for b in range(n_bins):
        members = values[bin_of == b]  # ascending index order preserved
        counts[b] = len(members)
        if len(members):
            means[b] = _ascending_mean(members)
    return BinnedStatistic(bin_edges=edges, means=means, counts=counts, degenerate=degenerate)
