"""Kernel distance: unbiased MMD^2 with a cubic polynomial kernel.

k(x, y) = (x.y / d + 1)^3, averaged over random equally-sized subsets. The
estimator is unbiased, which makes it usable on small sets where the
Fréchet distance's sample bias dominates.
"""

from __future__ import annotations

import numpy as np

from .frechet import MetricError


def polynomial_kernel(x: np.ndarray, y: np.ndarray, degree: int = 3) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** degree


def _unbiased_mmd2(x: np.ndarray, y: np.ndarray) -> float:
    m = x.shape[0]
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    sum_off_xx = kxx.sum() - np.trace(kxx)
    sum_off_yy = kyy.sum() - np.trace(kyy)
    return float(
        sum_off_xx / (m * (m - 1)) + sum_off_yy / (m * (m - 1)) - 2.0 * kxy.mean()
    )


def kid(
    feat_a: np.ndarray,
    feat_b: np.ndarray,
    subset_size: int = 1000,
    n_subsets: int = 100,
    seed: int = 0,
) -> float:
    """Mean over subsets of the unbiased MMD^2 between two feature sets."""
    feat_a = np.asarray(feat_a, dtype=np.float64)
    feat_b = np.asarray(feat_b, dtype=np.float64)
    if feat_a.shape[0] < subset_size or feat_b.shape[0] < subset_size:
        raise MetricError(
            f"both sets need >= subset_size={subset_size} samples, got "
            f"{feat_a.shape[0]} and {feat_b.shape[0]}"
        )
    if subset_size < 2:
        raise MetricError("subset_size must be >= 2 for the unbiased estimator")
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(n_subsets):
        ia = rng.choice(feat_a.shape[0], subset_size, replace=False)
        ib = rng.choice(feat_b.shape[0], subset_size, replace=False)
        values.append(_unbiased_mmd2(feat_a[ia], feat_b[ib]))
    return float(np.mean(values))
