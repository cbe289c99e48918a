"""Fréchet distance between Gaussian moment summaries of feature sets.

The matrix square root is taken by eigendecomposition of the symmetrized
product sqrt(Sa) Sb sqrt(Sa); eigenvalues below 1e-12 are clamped to zero,
which keeps the distance finite and non-negative for rank-deficient sample
covariances.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

EIG_CLAMP = 1e-12


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise MetricError(f"need at least 2 samples, got {self.count}")
        if self.cov.shape != (self.mean.shape[0], self.mean.shape[0]):
            raise MetricError(
                f"covariance shape {self.cov.shape} does not match "
                f"mean dimension {self.mean.shape[0]}"
            )
        if not np.allclose(self.cov, self.cov.T, atol=1e-8):
            raise MetricError("covariance must be symmetric")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def gaussian_stats(features: np.ndarray) -> GaussianStats:
    """Sample mean and unbiased covariance of an (N, d) feature array."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise MetricError(
            f"need an (N >= 2, d) feature array, got shape {features.shape}"
        )
    mean = features.mean(axis=0)
    cov = np.cov(features, rowvar=False)
    cov = np.atleast_2d(cov)
    return GaussianStats(mean=mean, cov=cov, count=features.shape[0])


def _psd_sqrt(s: np.ndarray) -> np.ndarray:
    sym = (s + s.T) / 2.0
    w, v = np.linalg.eigh(sym)
    w = np.where(w < EIG_CLAMP, 0.0, w)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2))."""
    if a.dim != b.dim:
        raise MetricError(f"dimension mismatch: {a.dim} vs {b.dim}")
    for stats, name in ((a, "a"), (b, "b")):
        if not (np.isfinite(stats.mean).all() and np.isfinite(stats.cov).all()):
            raise MetricError(f"non-finite statistics in argument {name}")
    diff = a.mean - b.mean
    root_a = _psd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    inner = (inner + inner.T) / 2.0
    eigvals = np.linalg.eigvalsh(inner)
    eigvals = np.where(eigvals < EIG_CLAMP, 0.0, eigvals)
    trace_term = np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sqrt(eigvals).sum()
    return float(diff @ diff + trace_term)


def fid(
    generated_features: np.ndarray,
    real_stats: GaussianStats,
    min_count: int | None = None,
) -> float:
    """Fréchet distance between generated features and cached real stats.

    ``generated_features`` are features of the designated evaluation space
    (use ``features.extract_features`` to produce them). A count below
    ``min_count`` warns rather than fails, so desk-scale runs stay usable.
    """
    generated_features = np.asarray(generated_features, dtype=np.float64)
    if min_count is not None and generated_features.shape[0] < min_count:
        warnings.warn(
            f"FID computed from {generated_features.shape[0]} samples "
            f"(configured floor is {min_count}); treat the value as noisy",
            stacklevel=2,
        )
    return frechet_distance(gaussian_stats(generated_features), real_stats)


def rel_fd(model_fds: dict, rgb_baseline_fds: dict) -> dict:
    """Per-layer FD divided by the RGB-baseline FD; > 1 means worse."""
    if set(model_fds) != set(rgb_baseline_fds):
        raise MetricError(
            f"layer sets differ: {sorted(model_fds)} vs {sorted(rgb_baseline_fds)}"
        )
    out = {}
    for layer, baseline in rgb_baseline_fds.items():
        if baseline <= 0:
            raise MetricError(f"baseline FD for layer {layer} must be > 0")
        out[layer] = model_fds[layer] / baseline
    return out
